use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const QUANTILE_LEVELS: usize = 100;
pub const QUANTILE_MIN_OBSERVATIONS: usize = 100;

/// Empirical CDF of observed quantiles sampled at the levels `k / 100`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantileMap {
    /// `frequencies[k]` is the fraction of observations at or below `k / 100`;
    /// the first entry is 0 and the last is 1.
    pub frequencies: Vec<f64>,
}

pub fn fit_quantile_map(quantiles: &[f64]) -> Result<QuantileMap> {
    if quantiles.len() < QUANTILE_MIN_OBSERVATIONS {
        return Err(Error::InsufficientData(format!(
            "quantile map needs at least {QUANTILE_MIN_OBSERVATIONS} observations, got {}",
            quantiles.len()
        )));
    }
    if quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
        return Err(Error::validation("quantiles", "observations must lie in [0, 1]"));
    }
    let mut sorted = quantiles.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut frequencies: Vec<f64> = (0..=QUANTILE_LEVELS)
        .map(|k| sorted.partition_point(|&q| q <= level(k)) as f64 / n)
        .collect();
    frequencies[0] = 0.0;
    frequencies[QUANTILE_LEVELS] = 1.0;
    Ok(QuantileMap { frequencies })
}

fn level(k: usize) -> f64 {
    k as f64 / QUANTILE_LEVELS as f64
}

impl QuantileMap {
    pub fn identity() -> Self {
        QuantileMap { frequencies: (0..=QUANTILE_LEVELS).map(level).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.frequencies;
        if f.len() != QUANTILE_LEVELS + 1 {
            return Err(Error::validation("quantile map", format!("expected {} levels", QUANTILE_LEVELS + 1)));
        }
        if f[0] != 0.0 || f[QUANTILE_LEVELS] != 1.0 || f.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::validation("quantile map", "frequencies must rise monotonically from 0 to 1"));
        }
        Ok(())
    }

    /// Linear interpolation of the frequency table at `q`, clamped to [0, 1].
    pub fn apply(&self, q: f64) -> f64 {
        let x = q.clamp(0.0, 1.0) * QUANTILE_LEVELS as f64;
        let k = (x.floor() as usize).min(QUANTILE_LEVELS - 1);
        let t = x - k as f64;
        self.frequencies[k] + t * (self.frequencies[k + 1] - self.frequencies[k])
    }
}
