//! Episode-respecting calibration/test splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FrameRecord;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Calibration,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub labels: BTreeMap<String, Split>,
    pub calibration_fraction: f64,
}

impl SplitAssignment {
    pub fn split_of(&self, frame_id: &str) -> Option<Split> {
        self.labels.get(frame_id).copied()
    }

    pub fn frames_in(&self, split: Split) -> impl Iterator<Item = &str> {
        self.labels
            .iter()
            .filter(move |(_, s)| **s == split)
            .map(|(id, _)| id.as_str())
    }

    pub fn count(&self, split: Split) -> usize {
        self.frames_in(split).count()
    }
}

/// Assigns whole episodes to the calibration or test split.
///
/// The calibration split receives the achievable frame count closest to
/// `calibration_fraction` of all frames (both splits non-empty). Among the
/// episode subsets reaching that count, the one preferring episodes earliest
/// in a seeded shuffle of the episode ids is chosen.
pub fn assign_splits<T: Real>(
    frames: &[FrameRecord<T>],
    calibration_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    let episodes: Vec<(&str, &str)> = frames
        .iter()
        .map(|f| (f.episode_id.as_str(), f.frame_id.as_str()))
        .collect();
    assign_episode_splits(&episodes, calibration_fraction, seed)
}

/// Split assignment over `(episode_id, frame_id)` pairs.
pub fn assign_episode_splits(
    frames: &[(&str, &str)],
    calibration_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    if !(calibration_fraction > 0.0 && calibration_fraction < 1.0) {
        return Err(Error::validation("calibration_fraction", "must lie in (0, 1)"));
    }
    if frames.is_empty() {
        return Err(Error::validation("frames", "no frames to split"));
    }
    let mut by_episode: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for &(ep, fr) in frames {
        by_episode.entry(ep).or_default().push(fr);
    }
    if by_episode.len() == 1 {
        return Err(Error::Split("cannot split single episode".into()));
    }

    let mut order: Vec<(&str, usize)> = by_episode.iter().map(|(e, f)| (*e, f.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let total: usize = order.iter().map(|(_, n)| n).sum();
    let target = calibration_fraction * total as f64;

    // suffix[i][s]: frame count s reachable using episodes i.. of the shuffled order.
    let k = order.len();
    let mut suffix = vec![vec![false; total + 1]; k + 1];
    suffix[k][0] = true;
    for i in (0..k).rev() {
        let n = order[i].1;
        for s in 0..=total {
            suffix[i][s] = suffix[i + 1][s] || (s >= n && suffix[i + 1][s - n]);
        }
    }
    let best = (1..total)
        .filter(|&s| suffix[0][s])
        .min_by(|&a, &b| {
            let da = (a as f64 - target).abs();
            let db = (b as f64 - target).abs();
            da.total_cmp(&db).then(a.cmp(&b))
        })
        .ok_or_else(|| Error::Split("no episode partition leaves both splits non-empty".into()))?;

    let mut remaining = best;
    let mut calib = Vec::new();
    for (i, &(ep, n)) in order.iter().enumerate() {
        if remaining >= n && suffix[i + 1][remaining - n] {
            calib.push(ep);
            remaining -= n;
        }
    }
    debug_assert_eq!(remaining, 0);

    let mut labels = BTreeMap::new();
    for (ep, frames) in &by_episode {
        let split = if calib.contains(ep) {
            Split::Calibration
        } else {
            Split::Test
        };
        for fr in frames {
            if labels.insert((*fr).to_string(), split).is_some() {
                return Err(Error::validation("frame_id", format!("duplicate frame id {fr}")));
            }
        }
    }
    Ok(SplitAssignment {
        labels,
        calibration_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dataset(sizes: &[usize]) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut id = 0;
        for (e, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                out.push((format!("ep{e:03}"), format!("f{id:05}")));
                id += 1;
            }
        }
        out
    }

    fn borrow(d: &[(String, String)]) -> Vec<(&str, &str)> {
        d.iter().map(|(e, f)| (e.as_str(), f.as_str())).collect()
    }

    #[test]
    fn ten_by_ten_gives_two_episodes() {
        let d = dataset(&[10; 10]);
        let a = assign_episode_splits(&borrow(&d), 0.2, 7).unwrap();
        assert_eq!(a.count(Split::Calibration), 20);
        assert_eq!(a.count(Split::Test), 80);
        let b = assign_episode_splits(&borrow(&d), 0.2, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uneven_episodes_pick_closest_subset() {
        // Brute force over all subsets of {10, 10, 80}: {10, 10} gives exactly 20.
        let d = dataset(&[10, 10, 80]);
        for seed in 0..20 {
            let a = assign_episode_splits(&borrow(&d), 0.2, seed).unwrap();
            let calib: Vec<_> = a.frames_in(Split::Calibration).collect();
            assert_eq!(calib.len(), 20);
            assert!(calib.iter().all(|f| d.iter().any(|(e, g)| g == f && e != "ep002")));
        }
    }

    #[test]
    fn single_episode_is_rejected() {
        let d = dataset(&[10]);
        let err = assign_episode_splits(&borrow(&d), 0.2, 0).unwrap_err();
        assert!(err.to_string().contains("cannot split single episode"));
        assert!(assign_episode_splits(&borrow(&d), 0.0, 0).is_err());
        assert!(assign_episode_splits(&[], 0.2, 0).is_err());
    }

    #[test]
    fn different_seeds_can_pick_different_episodes() {
        let d = dataset(&[10; 10]);
        let picks: std::collections::BTreeSet<Vec<String>> = (0..10)
            .map(|s| {
                assign_episode_splits(&borrow(&d), 0.2, s)
                    .unwrap()
                    .frames_in(Split::Calibration)
                    .map(str::to_string)
                    .collect()
            })
            .collect();
        assert!(picks.len() > 1);
    }

    fn best_subset_count(sizes: &[usize], frac: f64) -> usize {
        let total: usize = sizes.iter().sum();
        let target = frac * total as f64;
        let mut best = None::<usize>;
        for mask in 0u32..(1 << sizes.len()) {
            let s: usize = (0..sizes.len()).filter(|i| mask >> i & 1 == 1).map(|i| sizes[i]).sum();
            if s == 0 || s == total {
                continue;
            }
            best = Some(match best {
                None => s,
                Some(b) => {
                    let (da, db) = ((s as f64 - target).abs(), (b as f64 - target).abs());
                    if da < db || (da == db && s < b) { s } else { b }
                }
            });
        }
        best.unwrap()
    }

    proptest! {
        #[test]
        fn episodes_never_straddle_and_count_is_optimal(
            sizes in proptest::collection::vec(1usize..15, 2..9),
            frac in 0.05f64..0.95,
            seed in any::<u64>(),
        ) {
            let d = dataset(&sizes);
            let a = assign_episode_splits(&borrow(&d), frac, seed).unwrap();
            let mut per_ep: BTreeMap<&str, Split> = BTreeMap::new();
            for (e, f) in &d {
                let s = a.split_of(f).unwrap();
                if let Some(prev) = per_ep.insert(e, s) {
                    prop_assert_eq!(prev, s);
                }
            }
            prop_assert_eq!(a.count(Split::Calibration), best_subset_count(&sizes, frac));
        }
    }
}
