//! Many-to-many matching of detections to annotations, and the labelled
//! records that calibration and evaluation consume.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::FrameRecord;
use crate::region::RegionSpec;
use crate::scalar::Real;
use crate::uncertainty::{ellipse_cells, undetected_area_probability, PresenceConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub frame_id: String,
    pub timestep: u16,
    /// Sorted `(detection_id, object_id)` pairs.
    pub pairs: Vec<(u32, u32)>,
    pub unmatched_detections: Vec<u32>,
    pub unmatched_annotations: Vec<u32>,
}

impl MatchResult {
    pub fn is_detection_matched(&self, detection_id: u32) -> bool {
        self.pairs.iter().any(|&(d, _)| d == detection_id)
    }

    pub fn objects_for(&self, detection_id: u32) -> Vec<u32> {
        self.pairs.iter().filter(|&&(d, _)| d == detection_id).map(|&(_, o)| o).collect()
    }
}

/// A detection matches an annotation iff at least one annotated pixel lies in
/// the detection's `ellipse_mass` location ellipse at `timestep`. Detections
/// without a location at `timestep` take no part.
pub fn match_frame<T: Real>(frame: &FrameRecord<T>, timestep: u16, ellipse_mass: f64) -> MatchResult {
    let meta = frame.meta();
    let instances = frame.annotation(timestep).map(|a| a.instances()).unwrap_or(&[]);
    let mut pairs = BTreeSet::new();
    let mut detection_ids = BTreeSet::new();
    for d in &frame.detections {
        let Some(g) = d.location.get(&timestep) else { continue };
        detection_ids.insert(d.detection_id);
        let mut inside = vec![false; meta.num_cells()];
        for (r, c) in ellipse_cells(g, ellipse_mass, meta) {
            inside[meta.index(r, c)] = true;
        }
        for obj in instances {
            if obj.pixels().iter().any(|&(r, c)| inside[meta.index(r as usize, c as usize)]) {
                pairs.insert((d.detection_id, obj.object_id));
            }
        }
    }
    let matched_d: BTreeSet<u32> = pairs.iter().map(|&(d, _)| d).collect();
    let matched_o: BTreeSet<u32> = pairs.iter().map(|&(_, o)| o).collect();
    let object_ids: BTreeSet<u32> = instances.iter().map(|o| o.object_id).collect();
    MatchResult {
        frame_id: frame.frame_id.clone(),
        timestep,
        pairs: pairs.into_iter().collect(),
        unmatched_detections: detection_ids.difference(&matched_d).copied().collect(),
        unmatched_annotations: object_ids.difference(&matched_o).copied().collect(),
    }
}

/// Writes each result's pairs into `matched_annotations` of the frame's detections.
pub fn record_matches<T: Real>(frame: &mut FrameRecord<T>, result: &MatchResult) {
    for d in &mut frame.detections {
        if d.location.contains_key(&result.timestep) {
            d.matched_annotations.insert(result.timestep, result.objects_for(d.detection_id));
        }
    }
}

/// One `(presence, label)` record per detection with a presence value at the
/// result's timestep. The label is 1 iff the detection has at least one pair.
pub fn presence_labels<T: Real>(result: &MatchResult, frame: &FrameRecord<T>) -> Vec<(T, u8)> {
    frame
        .detections
        .iter()
        .filter_map(|d| {
            let p = *d.presence.get(&result.timestep)?;
            Some((p, result.is_detection_matched(d.detection_id) as u8))
        })
        .collect()
}

/// Whether any annotation without a matched detection has a pixel in `region`.
pub fn undetected_object_in_region<T: Real>(frame: &FrameRecord<T>, result: &MatchResult, region: &RegionSpec) -> bool {
    let meta = frame.meta();
    let rect = region.to_cell_rect(meta);
    let unmatched: BTreeSet<u32> = result.unmatched_annotations.iter().copied().collect();
    frame
        .annotation(result.timestep)
        .map(|a| a.instances())
        .unwrap_or(&[])
        .iter()
        .filter(|o| unmatched.contains(&o.object_id))
        .flat_map(|o| o.pixels())
        .any(|&(r, c)| rect.contains(r as usize, c as usize))
}

/// One `(p_area, label)` record per region, using timestep-0 detections and
/// the timestep-0 match result.
pub fn area_labels<T: Real>(
    frame: &FrameRecord<T>,
    result: &MatchResult,
    regions: &[RegionSpec],
    config: &PresenceConfig,
) -> Vec<(T, u8)> {
    let grid = &frame.grids[0];
    regions
        .iter()
        .map(|region| {
            let p = undetected_area_probability(grid, &frame.detections, region, config);
            (p, undetected_object_in_region(frame, result, region) as u8)
        })
        .collect()
}

/// Writes `frame_id,timestep,detection_id,object_id` rows: one per pair, then
/// unmatched detections and annotations with the counterpart left empty.
pub fn write_matches_csv(path: &Path, results: &[MatchResult]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "frame_id,timestep,detection_id,object_id").map_err(io)?;
    for r in results {
        for &(d, o) in &r.pairs {
            writeln!(w, "{},{},{d},{o}", r.frame_id, r.timestep).map_err(io)?;
        }
        for d in &r.unmatched_detections {
            writeln!(w, "{},{},{d},", r.frame_id, r.timestep).map_err(io)?;
        }
        for o in &r.unmatched_annotations {
            writeln!(w, "{},{},,{o}", r.frame_id, r.timestep).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{AnnotatedObject, AnnotationMask, DetectedObject, Gaussian2D, GridMeta, ProbGrid};

    fn meta() -> GridMeta<f64> {
        GridMeta::new(64, 64, 0.5, 31.5, 31.5, 0, 1.0).unwrap()
    }

    fn square(id: u32, r: u16, c: u16) -> AnnotatedObject<f64> {
        AnnotatedObject::from_pixels(id, vec![(r, c), (r, c + 1), (r + 1, c), (r + 1, c + 1)]).unwrap()
    }

    fn frame(objs: Vec<AnnotatedObject<f64>>, dets: Vec<(u32, [f64; 2], f64)>) -> FrameRecord<f64> {
        let m = meta();
        let occ: Vec<(u16, u16)> = objs.iter().flat_map(|o| o.pixels().to_vec()).collect();
        let mut cells = vec![0.0; m.num_cells()];
        for &(r, c) in &occ {
            cells[m.index(r as usize, c as usize)] = 0.9;
        }
        let mask = AnnotationMask::from_instances(m, 0, objs).unwrap();
        let mut f = FrameRecord::new("f0", "e0", vec![ProbGrid::new(m, 0, cells).unwrap()], vec![mask]).unwrap();
        for (id, mean, var) in dets {
            let mut d = DetectedObject::new(id, 5.0);
            d.location.insert(0, Gaussian2D::isotropic(mean, var).unwrap());
            f.detections.push(d);
        }
        f
    }

    #[test]
    fn covering_ellipse_matches() {
        let f = frame(vec![square(7, 40, 40)], vec![(0, [40.5, 40.5], 2.0)]);
        let r = match_frame(&f, 0, 0.99);
        assert_eq!(r.pairs, vec![(0, 7)]);
        assert!(r.unmatched_detections.is_empty() && r.unmatched_annotations.is_empty());
    }

    #[test]
    fn distant_detection_unmatched() {
        let f = frame(vec![square(7, 2, 2)], vec![(0, [60.0, 60.0], 0.1)]);
        let r = match_frame(&f, 0, 0.99);
        assert!(r.pairs.is_empty());
        assert_eq!(r.unmatched_detections, vec![0]);
        assert_eq!(r.unmatched_annotations, vec![7]);
    }

    #[test]
    fn two_detections_share_an_annotation() {
        let f = frame(vec![square(3, 20, 20)], vec![(0, [20.0, 20.0], 1.0), (1, [21.0, 21.0], 1.0)]);
        let r = match_frame(&f, 0, 0.99);
        assert_eq!(r.pairs, vec![(0, 3), (1, 3)]);
    }

    #[test]
    fn permutation_invariant() {
        let objs = vec![square(1, 10, 10), square(2, 30, 30), square(3, 31, 34)];
        let dets = vec![(0, [10.5, 10.5], 1.0), (1, [31.0, 32.0], 4.0), (2, [50.0, 50.0], 1.0)];
        let a = match_frame(&frame(objs.clone(), dets.clone()), 0, 0.99);
        let mut objs_r = objs;
        objs_r.reverse();
        let mut dets_r = dets;
        dets_r.reverse();
        let b = match_frame(&frame(objs_r, dets_r), 0, 0.99);
        assert_eq!(a, b);
        assert_eq!(a.pairs, vec![(0, 1), (1, 2), (1, 3)]);
    }

    #[test]
    fn shrinking_mass_never_adds_pairs() {
        let objs: Vec<_> = (0..6).map(|i| square(i, 10 + 7 * i as u16, 12 + 5 * i as u16)).collect();
        let dets: Vec<_> = (0..6).map(|i| (i, [12.0 + 7.0 * i as f64, 13.0 + 5.0 * i as f64], 2.0 + i as f64)).collect();
        let f = frame(objs, dets);
        let mut prev: Option<BTreeSet<(u32, u32)>> = None;
        for mass in [0.999, 0.99, 0.9, 0.7, 0.5, 0.2, 0.05] {
            let cur: BTreeSet<_> = match_frame(&f, 0, mass).pairs.into_iter().collect();
            if let Some(p) = &prev {
                assert!(cur.is_subset(p), "mass {mass}");
            }
            prev = Some(cur);
        }
    }

    #[test]
    fn every_detection_classified_once() {
        let objs = vec![square(1, 10, 10), square(2, 40, 40)];
        let dets = vec![(0, [10.0, 10.0], 1.0), (1, [55.0, 5.0], 1.0), (2, [41.0, 41.0], 1.0)];
        let r = match_frame(&frame(objs, dets), 0, 0.99);
        let matched: BTreeSet<u32> = r.pairs.iter().map(|p| p.0).collect();
        for d in 0..3 {
            assert!(matched.contains(&d) ^ r.unmatched_detections.contains(&d));
        }
    }

    #[test]
    fn presence_label_records() {
        let mut f = frame(vec![square(1, 10, 10)], vec![(0, [10.5, 10.5], 1.0), (1, [50.0, 50.0], 1.0)]);
        f.detections[0].presence.insert(0, 0.9);
        f.detections[1].presence.insert(0, 0.7);
        let r = match_frame(&f, 0, 0.99);
        assert_eq!(presence_labels(&r, &f), vec![(0.9, 1), (0.7, 0)]);
        let empty = frame(vec![], vec![]);
        assert!(presence_labels(&match_frame(&empty, 0, 0.99), &empty).is_empty());
    }

    #[test]
    fn area_label_examples() {
        let region = RegionSpec {
            name: "ahead".into(),
            forward_min: 0.0,
            forward_max: 8.0,
            lateral_min: -8.0,
            lateral_max: 8.0,
        };
        let cfg = PresenceConfig::default();
        // Unmatched annotation inside the region.
        let f = frame(vec![square(1, 36, 30)], vec![]);
        let r = match_frame(&f, 0, 0.99);
        assert_eq!(area_labels(&f, &r, std::slice::from_ref(&region), &cfg)[0].1, 1);
        // Same annotation, now matched.
        let f = frame(vec![square(1, 36, 30)], vec![(0, [36.5, 30.5], 1.0)]);
        let r = match_frame(&f, 0, 0.99);
        let labels = area_labels(&f, &r, std::slice::from_ref(&region), &cfg);
        assert_eq!(labels[0].1, 0);
        assert!(labels[0].0 < 1e-12);
        // Nothing in the region.
        let f = frame(vec![square(1, 2, 2)], vec![]);
        let r = match_frame(&f, 0, 0.99);
        assert_eq!(area_labels(&f, &r, &[region], &cfg)[0].1, 0);
    }

    #[test]
    fn record_matches_fills_detections() {
        let mut f = frame(vec![square(4, 10, 10)], vec![(0, [10.5, 10.5], 1.0), (1, [50.0, 50.0], 1.0)]);
        let r = match_frame(&f, 0, 0.99);
        record_matches(&mut f, &r);
        assert_eq!(f.detections[0].matched_annotations[&0], vec![4]);
        assert!(f.detections[1].matched_annotations[&0].is_empty());
    }

    #[test]
    fn csv_rows() {
        let f = frame(vec![square(1, 10, 10), square(2, 40, 40)], vec![(0, [10.5, 10.5], 1.0), (5, [55.0, 5.0], 1.0)]);
        let r = match_frame(&f, 0, 0.99);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("matches.csv");
        write_matches_csv(&path, &[r]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "frame_id,timestep,detection_id,object_id\nf0,0,0,1\nf0,0,5,\nf0,0,,2\n");
    }
}
