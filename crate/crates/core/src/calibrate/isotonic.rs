use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Monotone score-to-probability map fitted by pool-adjacent-violators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsotonicMap {
    /// Strictly increasing scores.
    pub breakpoints: Vec<f64>,
    /// Non-decreasing fitted values, unclipped.
    pub values: Vec<f64>,
    /// Lower bound on every output, `1 / number of fitting instances`.
    pub clip_floor: f64,
    /// Step lookup instead of linear interpolation between breakpoints.
    #[serde(default)]
    pub step: bool,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    lo: f64,
    hi: f64,
    sum: f64,
    weight: f64,
}

impl Block {
    fn mean(&self) -> f64 {
        self.sum / self.weight
    }
}

/// PAVA over `(score, label_sum, weight)` triples already sorted by score
/// with equal scores merged.
fn pava(sorted: &[(f64, f64, f64)]) -> Vec<Block> {
    let mut blocks: Vec<Block> = Vec::with_capacity(sorted.len());
    for &(s, y, w) in sorted {
        blocks.push(Block { lo: s, hi: s, sum: y, weight: w });
        while blocks.len() > 1 {
            let n = blocks.len();
            if blocks[n - 2].mean() <= blocks[n - 1].mean() {
                break;
            }
            let b = blocks.pop().unwrap();
            let a = blocks.last_mut().unwrap();
            a.hi = b.hi;
            a.sum += b.sum;
            a.weight += b.weight;
        }
    }
    blocks
}

fn sorted_merged(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<(Vec<(f64, f64, f64)>, usize)> {
    let mut v: Vec<(f64, f64)> = pairs.into_iter().collect();
    if let Some(bad) = v.iter().find(|(s, y)| !s.is_finite() || !y.is_finite()) {
        return Err(Error::validation("scores", format!("non-finite calibration pair {bad:?}")));
    }
    let n = v.len();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64, f64)> = Vec::new();
    for (s, y) in v {
        match merged.last_mut() {
            Some(last) if last.0 == s => {
                last.1 += y;
                last.2 += 1.0;
            }
            _ => merged.push((s, y, 1.0)),
        }
    }
    Ok((merged, n))
}

/// Least-squares non-decreasing fit, one value per input in ascending score order.
pub fn isotonic_fitted_values(pairs: &[(f64, u8)]) -> Result<Vec<f64>> {
    let (merged, _) = sorted_merged(pairs.iter().map(|&(s, y)| (s, y as f64)))?;
    let blocks = pava(&merged);
    let mut out = Vec::with_capacity(pairs.len());
    let mut mi = 0;
    for b in &blocks {
        while mi < merged.len() && merged[mi].0 <= b.hi {
            out.extend(std::iter::repeat_n(b.mean(), merged[mi].2 as usize));
            mi += 1;
        }
    }
    Ok(out)
}

pub fn fit_isotonic(pairs: &[(f64, u8)]) -> Result<IsotonicMap> {
    fit_isotonic_iter(pairs.iter().map(|&(s, y)| (s, y as f64)))
}

/// Fits from any stream of `(score, label)` pairs with labels in {0, 1}.
pub fn fit_isotonic_iter(pairs: impl IntoIterator<Item = (f64, f64)>) -> Result<IsotonicMap> {
    let (merged, n) = sorted_merged(pairs)?;
    if n < 2 {
        return Err(Error::InsufficientData(format!("isotonic fit needs at least 2 pairs, got {n}")));
    }
    let blocks = pava(&merged);
    let mut breakpoints = Vec::with_capacity(2 * blocks.len());
    let mut values = Vec::with_capacity(2 * blocks.len());
    for b in &blocks {
        let v = b.mean();
        breakpoints.push(b.lo);
        values.push(v);
        if b.hi > b.lo {
            breakpoints.push(b.hi);
            values.push(v);
        }
    }
    Ok(IsotonicMap { breakpoints, values, clip_floor: 1.0 / n as f64, step: false })
}

impl IsotonicMap {
    pub fn validate(&self) -> Result<()> {
        if self.breakpoints.is_empty() || self.breakpoints.len() != self.values.len() {
            return Err(Error::validation("isotonic", "breakpoints and values must be non-empty and equal length"));
        }
        if self.breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::validation("isotonic", "breakpoints must be strictly increasing"));
        }
        if self.values.windows(2).any(|w| !(w[0] <= w[1])) || self.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("isotonic", "values must be non-decreasing within [0, 1]"));
        }
        if !(self.clip_floor > 0.0 && self.clip_floor <= 1.0) {
            return Err(Error::validation("isotonic", "clip_floor must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn with_step(mut self, step: bool) -> Self {
        self.step = step;
        self
    }

    pub fn apply(&self, s: f64) -> f64 {
        let bp = &self.breakpoints;
        let v = &self.values;
        let raw = if s <= bp[0] {
            v[0]
        } else if s >= bp[bp.len() - 1] {
            v[v.len() - 1]
        } else {
            // bp[i - 1] < s <= bp[i]
            let i = bp.partition_point(|&b| b < s);
            if bp[i] == s {
                v[i]
            } else if self.step {
                v[i - 1]
            } else {
                let t = (s - bp[i - 1]) / (bp[i] - bp[i - 1]);
                v[i - 1] + t * (v[i] - v[i - 1])
            }
        };
        raw.max(self.clip_floor)
    }
}
