//! Grid-to-object extraction: cluster seeding, stratified sample points and
//! mixture fitting, run independently per timestep and associated back to the
//! current-timestep detections.

mod gmm;

pub use gmm::{fit_gmm, GmmFit};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DetectedObject, FrameRecord, ProbGrid, WeightedGaussian};
use crate::scalar::Real;

/// Shape size (pixels) given to freshly extracted detections.
pub const DEFAULT_SHAPE_PIXELS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    /// Cells below this probability contribute no sample points and no seeds.
    pub p_thresh: f64,
    /// Multiplier turning a cell probability into a sample count.
    pub m_thresh: f64,
    pub max_components: usize,
    pub em_max_iters: usize,
    /// Relative log-likelihood change at which EM stops.
    pub em_tol: f64,
    /// Added to every covariance diagonal in each M-step.
    pub cov_reg: f64,
    pub min_seed_separation_cells: f64,
    /// Association gate between a future Gaussian and a current detection, per timestep.
    pub gating_distance_cells: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            p_thresh: 0.01,
            m_thresh: 100.0,
            max_components: 32,
            em_max_iters: 200,
            em_tol: 1e-6,
            cov_reg: 1e-4,
            min_seed_separation_cells: 3.0,
            gating_distance_cells: 10.0,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::validation(field, msg))
            }
        };
        check(self.p_thresh > 0.0 && self.p_thresh < 1.0, "p_thresh", "must lie in (0, 1)")?;
        check(self.m_thresh > 0.0 && self.m_thresh.is_finite(), "m_thresh", "must be positive")?;
        check(self.max_components > 0, "max_components", "must be positive")?;
        check(self.em_max_iters > 0, "em_max_iters", "must be positive")?;
        check(self.em_tol > 0.0, "em_tol", "must be positive")?;
        check(self.cov_reg > 0.0, "cov_reg", "must be positive")?;
        check(self.min_seed_separation_cells > 0.0, "min_seed_separation_cells", "must be positive")?;
        check(self.gating_distance_cells > 0.0, "gating_distance_cells", "must be positive")
    }

    /// Whether every above-threshold cell is guaranteed a sample point from
    /// its rounded count alone, without the floor at one.
    pub fn counts_cover_threshold(&self) -> bool {
        self.p_thresh * self.m_thresh >= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint<T: Real> {
    pub row: T,
    pub col: T,
    pub multiplicity: u32,
}

/// Cell centers with integer repeat counts, the stratified stand-in for
/// sampling locations in proportion to cell probability.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePoints<T: Real> {
    pub points: Vec<SamplePoint<T>>,
}

impl<T: Real> SamplePoints<T> {
    pub fn total_multiplicity(&self) -> u64 {
        self.points.iter().map(|p| p.multiplicity as u64).sum()
    }
}

/// Local maxima at or above `p_thresh`, strongest first, with greedy
/// suppression of maxima within `min_seed_separation_cells` of an accepted one.
///
/// A cell is a local maximum when no 8-neighbor is larger and no equal
/// neighbor precedes it in (row, col) order.
pub fn seed_clusters<T: Real>(grid: &ProbGrid<T>, config: &ExtractionConfig) -> Vec<(usize, usize)> {
    let meta = grid.meta();
    let (h, w) = (meta.height_cells, meta.width_cells);
    let thresh = T::lit(config.p_thresh);
    let mut maxima: Vec<(T, usize, usize)> = Vec::new();
    for (r, c, p) in grid.iter() {
        if p < thresh {
            continue;
        }
        let mut is_max = true;
        'nbrs: for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    continue;
                }
                let q = grid.get(nr as usize, nc as usize);
                if q > p || (q == p && (nr, nc) < (r as i64, c as i64)) {
                    is_max = false;
                    break 'nbrs;
                }
            }
        }
        if is_max {
            maxima.push((p, r, c));
        }
    }
    maxima.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));

    let sep2 = config.min_seed_separation_cells.powi(2);
    let mut seeds: Vec<(usize, usize)> = Vec::new();
    for (_, r, c) in maxima {
        if seeds.len() == config.max_components {
            break;
        }
        let clear = seeds.iter().all(|&(sr, sc)| {
            let d2 = (sr as f64 - r as f64).powi(2) + (sc as f64 - c as f64).powi(2);
            d2 > sep2
        });
        if clear {
            seeds.push((r, c));
        }
    }
    seeds
}

/// Every cell with `p >= p_thresh` becomes a point with multiplicity
/// `max(1, round(p * m_thresh))`, rounding half away from zero.
pub fn build_sample_points<T: Real>(grid: &ProbGrid<T>, config: &ExtractionConfig) -> SamplePoints<T> {
    let thresh = T::lit(config.p_thresh);
    let m = T::lit(config.m_thresh);
    let points = grid
        .iter()
        .filter(|&(_, _, p)| p >= thresh)
        .map(|(r, c, p)| {
            let count = crate::scalar::round_half_away(p * m).to_u32().unwrap_or(u32::MAX).max(1);
            SamplePoint {
                row: T::from_usize_lossy(r),
                col: T::from_usize_lossy(c),
                multiplicity: count,
            }
        })
        .collect();
    SamplePoints { points }
}

/// Seeds, samples and fits one grid.
pub fn extract_locations<T: Real>(grid: &ProbGrid<T>, config: &ExtractionConfig) -> Result<GmmFit<T>> {
    let seeds = seed_clusters(grid, config);
    let points = build_sample_points(grid, config);
    fit_gmm(&points, &seeds, config)
}

/// Extracts detections using every timestep of the frame.
pub fn extract_objects<T: Real>(frame: &FrameRecord<T>, config: &ExtractionConfig) -> Result<Vec<DetectedObject<T>>> {
    let all: Vec<u16> = (0..frame.grids.len() as u16).collect();
    extract_objects_at(frame, config, &all)
}

/// Extracts detections at timestep 0 and the listed future timesteps.
///
/// Timestep-0 components become detections (ids in component order). Each
/// future timestep's components are associated one-to-one to detections by
/// ascending mean distance, within `gating_distance_cells * t`; unassociated
/// future components are discarded. Presence is left unset.
pub fn extract_objects_at<T: Real>(
    frame: &FrameRecord<T>,
    config: &ExtractionConfig,
    timesteps: &[u16],
) -> Result<Vec<DetectedObject<T>>> {
    let mut steps: BTreeSet<u16> = timesteps.iter().copied().collect();
    steps.insert(0);
    let mut detections: Vec<DetectedObject<T>> = Vec::new();
    for t in steps {
        let grid = frame
            .grid(t)
            .ok_or_else(|| Error::validation("timestep", format!("frame {} has no timestep {t}", frame.frame_id)))?;
        let fit = extract_locations(grid, config)?;
        if t == 0 {
            detections = fit
                .components
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let mut d = DetectedObject::new(i as u32, T::lit(DEFAULT_SHAPE_PIXELS));
                    d.location.insert(0, c.gaussian);
                    d
                })
                .collect();
        } else {
            let gate = T::lit(config.gating_distance_cells * t as f64);
            for (det_idx, comp) in associate(&detections, &fit.components, gate) {
                detections[det_idx].location.insert(t, comp.gaussian);
            }
        }
    }
    Ok(detections)
}

fn associate<'a, T: Real>(
    detections: &[DetectedObject<T>],
    components: &'a [WeightedGaussian<T>],
    gate: T,
) -> Vec<(usize, &'a WeightedGaussian<T>)> {
    let mut pairs: Vec<(T, usize, usize)> = Vec::new();
    for (i, comp) in components.iter().enumerate() {
        let m = comp.gaussian.mean();
        for (j, det) in detections.iter().enumerate() {
            let Some(g0) = det.location.get(&0) else { continue };
            let m0 = g0.mean();
            let d = ((m[0] - m0[0]).powi(2) + (m[1] - m0[1]).powi(2)).sqrt();
            if d <= gate {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut used_comp = vec![false; components.len()];
    let mut used_det = vec![false; detections.len()];
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_comp[i] && !used_det[j] {
            used_comp[i] = true;
            used_det[j] = true;
            out.push((j, &components[i]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{AnnotationMask, GridMeta};
    use crate::synth::{render_field, Bump};

    fn meta(steps: u16) -> GridMeta<f64> {
        GridMeta::new(100, 100, 0.5, 49.5, 49.5, steps, 1.0).unwrap()
    }

    fn grid_with(values: &[((usize, usize), f64)]) -> ProbGrid<f64> {
        let m = meta(0);
        let mut cells = vec![0.0; m.num_cells()];
        for &((r, c), p) in values {
            cells[m.index(r, c)] = p;
        }
        ProbGrid::new(m, 0, cells).unwrap()
    }

    fn bump_grid(m: GridMeta<f64>, t: u16, bumps: &[Bump<f64>]) -> ProbGrid<f64> {
        ProbGrid::new(m, t, render_field(&m, bumps, 0.0)).unwrap()
    }

    #[test]
    fn seeds_on_empty_and_single_peak() {
        let cfg = ExtractionConfig::default();
        assert!(seed_clusters(&grid_with(&[]), &cfg).is_empty());
        let g = bump_grid(meta(0), 0, &[Bump { center: (50.0, 60.0), peak: 0.8, spread: 1.5 }]);
        assert_eq!(seed_clusters(&g, &cfg), vec![(50, 60)]);
    }

    #[test]
    fn equal_peaks_within_separation_keep_lexicographic_first() {
        let cfg = ExtractionConfig { min_seed_separation_cells: 5.0, ..Default::default() };
        let g = grid_with(&[((10, 13), 0.5), ((10, 10), 0.5)]);
        assert_eq!(seed_clusters(&g, &cfg), vec![(10, 10)]);
        let wide = ExtractionConfig { min_seed_separation_cells: 2.0, ..Default::default() };
        assert_eq!(seed_clusters(&g, &wide), vec![(10, 10), (10, 13)]);
    }

    #[test]
    fn plateau_yields_single_seed() {
        let cfg = ExtractionConfig::default();
        let g = grid_with(&[((5, 5), 0.4), ((5, 6), 0.4), ((6, 5), 0.4), ((6, 6), 0.4)]);
        assert_eq!(seed_clusters(&g, &cfg), vec![(5, 5)]);
    }

    #[test]
    fn seeds_capped_at_max_components_strongest_first() {
        let cfg = ExtractionConfig { max_components: 2, ..Default::default() };
        let g = grid_with(&[((10, 10), 0.3), ((30, 30), 0.9), ((50, 50), 0.6)]);
        assert_eq!(seed_clusters(&g, &cfg), vec![(30, 30), (50, 50)]);
    }

    #[test]
    fn lowering_threshold_keeps_existing_seeds() {
        let m = meta(0);
        let bumps: Vec<_> = (0..8)
            .map(|i| Bump {
                center: (10.0 + 10.0 * i as f64, 15.0 + 7.3 * i as f64),
                peak: 0.005 + 0.1 * i as f64,
                spread: 1.2,
            })
            .collect();
        let g = bump_grid(m, 0, &bumps);
        for (hi, lo) in [(0.5, 0.1), (0.1, 0.01), (0.01, 0.001)] {
            let high = seed_clusters(&g, &ExtractionConfig { p_thresh: hi, ..Default::default() });
            let low = seed_clusters(&g, &ExtractionConfig { p_thresh: lo, ..Default::default() });
            assert!(high.iter().all(|s| low.contains(s)), "{hi} -> {lo}");
            assert!(low.len() >= high.len());
        }
    }

    #[test]
    fn sample_point_multiplicities() {
        let cfg = ExtractionConfig::default();
        let g = grid_with(&[((1, 1), 0.01), ((2, 2), 0.005), ((3, 3), 0.255), ((4, 4), 1.0)]);
        let pts = build_sample_points(&g, &cfg);
        let got: Vec<_> = pts.points.iter().map(|p| ((p.row, p.col), p.multiplicity)).collect();
        assert_eq!(got, vec![((1.0, 1.0), 1), ((3.0, 3.0), 26), ((4.0, 4.0), 100)]);
    }

    #[test]
    fn inverse_threshold_multiplier_covers_every_cell() {
        for &p_thresh in &[0.01, 0.02, 0.05, 0.1, 0.3] {
            let cfg = ExtractionConfig { p_thresh, m_thresh: 1.0 / p_thresh, ..Default::default() };
            assert!(cfg.counts_cover_threshold());
            let cells: Vec<_> = (0..50).map(|i| ((i, i), p_thresh + i as f64 * 0.013 % (1.0 - p_thresh))).collect();
            let pts = build_sample_points(&grid_with(&cells), &cfg);
            assert_eq!(pts.points.len(), 50);
            for pt in &pts.points {
                let p = cells[pt.row as usize].1;
                assert!((p * cfg.m_thresh).round() >= 1.0);
            }
        }
    }

    fn frame_with(bumps_per_t: &[Vec<Bump<f64>>]) -> FrameRecord<f64> {
        let steps = bumps_per_t.len() as u16 - 1;
        let m = meta(steps);
        let grids = bumps_per_t.iter().enumerate().map(|(t, b)| bump_grid(m, t as u16, b)).collect();
        let anns = (0..=steps).map(|t| AnnotationMask::empty(m, t).unwrap()).collect();
        FrameRecord::new("f", "e", grids, anns).unwrap()
    }

    #[test]
    fn static_object_tracked_through_all_timesteps() {
        let b = Bump { center: (40.3, 55.8), peak: 0.9, spread: 1.5 };
        let frame = frame_with(&vec![vec![b]; 5]);
        let dets = extract_objects(&frame, &ExtractionConfig::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].location.len(), 5);
        for g in dets[0].location.values() {
            let m = g.mean();
            assert!(((m[0] - 40.3).powi(2) + (m[1] - 55.8).powi(2)).sqrt() < 1.0);
        }
        assert!(dets[0].presence.is_empty());
    }

    #[test]
    fn empty_frame_and_vanishing_object() {
        let frame = frame_with(&vec![vec![]; 3]);
        assert!(extract_objects(&frame, &ExtractionConfig::default()).unwrap().is_empty());
        let b = Bump { center: (20.0, 20.0), peak: 0.9, spread: 1.5 };
        let frame = frame_with(&[vec![b], vec![], vec![]]);
        let dets = extract_objects(&frame, &ExtractionConfig::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].location.keys().copied().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn association_respects_gate_and_nearest_mean() {
        let a = Bump { center: (20.0, 20.0), peak: 0.9, spread: 1.5 };
        let b = Bump { center: (20.0, 50.0), peak: 0.9, spread: 1.5 };
        // At t=1, a moves 5 cells, b jumps 25 cells (outside the 10-cell gate).
        let a1 = Bump { center: (25.0, 20.0), ..a };
        let b1 = Bump { center: (45.0, 50.0), ..b };
        let frame = frame_with(&[vec![a, b], vec![a1, b1]]);
        let dets = extract_objects(&frame, &ExtractionConfig::default()).unwrap();
        assert_eq!(dets.len(), 2);
        let da = dets.iter().find(|d| d.location[&0].mean()[1] < 30.0).unwrap();
        let db = dets.iter().find(|d| d.location[&0].mean()[1] > 30.0).unwrap();
        assert!((da.location[&1].mean()[0] - 25.0).abs() < 0.5);
        assert!(!db.location.contains_key(&1));
    }

    #[test]
    fn subset_extraction_skips_unlisted_timesteps() {
        let b = Bump { center: (30.0, 30.0), peak: 0.9, spread: 1.5 };
        let frame = frame_with(&vec![vec![b]; 5]);
        let dets = extract_objects_at(&frame, &ExtractionConfig::default(), &[4]).unwrap();
        assert_eq!(dets[0].location.keys().copied().collect::<Vec<_>>(), vec![0, 4]);
    }
}
