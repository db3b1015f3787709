use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::sigmoid;

pub const BETA_INPUT_EPS: f64 = 1e-6;
pub const BETA_GRAD_TOL: f64 = 1e-8;
pub const BETA_MAX_ITERS: usize = 10_000;
pub const BETA_MIN_PAIRS: usize = 10;

/// Three-parameter beta calibration `sigmoid(a ln p - b ln(1 - p) + c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaMap {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl BetaMap {
    pub const IDENTITY: BetaMap = BetaMap { a: 1.0, b: 1.0, c: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0 && self.b >= 0.0 && self.c.is_finite() && self.a.is_finite() && self.b.is_finite()) {
            return Err(Error::validation("beta", "requires finite a >= 0, b >= 0 and c"));
        }
        Ok(())
    }

    pub fn apply(&self, p: f64) -> f64 {
        let [x1, x2] = features(p);
        sigmoid(self.a * x1 + self.b * x2 + self.c)
    }
}

fn features(p: f64) -> [f64; 2] {
    let p = p.clamp(BETA_INPUT_EPS, 1.0 - BETA_INPUT_EPS);
    [p.ln(), -(-p).ln_1p()]
}

/// Mean log-loss of `sigmoid(z)` against `y`, stable for large |z|.
fn log_loss(z: f64, y: f64) -> f64 {
    // -y ln s(z) - (1-y) ln(1-s(z)) = softplus(z) - y z
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - y * z
}

struct Problem {
    rows: Vec<([f64; 3], f64)>,
    /// Which of (a, b, c) are free.
    free: [bool; 3],
}

impl Problem {
    fn eval(&self, w: &[f64; 3]) -> (f64, [f64; 3], [[f64; 3]; 3]) {
        let n = self.rows.len() as f64;
        let mut loss = 0.0;
        let mut g = [0.0; 3];
        let mut h = [[0.0; 3]; 3];
        for (x, y) in &self.rows {
            let z = w[0] * x[0] + w[1] * x[1] + w[2] * x[2];
            let s = sigmoid(z);
            loss += log_loss(z, *y);
            let r = s - y;
            let v = s * (1.0 - s);
            for i in 0..3 {
                g[i] += r * x[i];
                for j in 0..3 {
                    h[i][j] += v * x[i] * x[j];
                }
            }
        }
        for i in 0..3 {
            g[i] /= n;
            for j in 0..3 {
                h[i][j] /= n;
            }
            if !self.free[i] {
                g[i] = 0.0;
                for j in 0..3 {
                    h[i][j] = 0.0;
                    h[j][i] = 0.0;
                }
                h[i][i] = 1.0;
            }
        }
        (loss / n, g, h)
    }

    fn loss(&self, w: &[f64; 3]) -> f64 {
        let n = self.rows.len() as f64;
        self.rows
            .iter()
            .map(|(x, y)| log_loss(w[0] * x[0] + w[1] * x[1] + w[2] * x[2], *y))
            .sum::<f64>()
            / n
    }

    /// Damped Newton with backtracking line search.
    fn minimize(&self, start: [f64; 3]) -> Result<[f64; 3]> {
        let mut w = start;
        let mut grad_norm = f64::INFINITY;
        for _ in 0..BETA_MAX_ITERS {
            let (loss, g, h) = self.eval(&w);
            grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if grad_norm < BETA_GRAD_TOL {
                return Ok(w);
            }
            let mut damping = 1e-10;
            let step = loop {
                let mut hd = h;
                for (i, row) in hd.iter_mut().enumerate() {
                    row[i] += damping;
                }
                match solve3(hd, g) {
                    Some(s) if s.iter().all(|v| v.is_finite()) => break s,
                    _ => damping *= 100.0,
                }
                if damping > 1e6 {
                    break g;
                }
            };
            let slope: f64 = -(0..3).map(|i| step[i] * g[i]).sum::<f64>();
            let direction = if slope < 0.0 { step } else { g };
            let slope = -(0..3).map(|i| direction[i] * g[i]).sum::<f64>();
            let mut t = 1.0;
            loop {
                let trial = [w[0] - t * direction[0], w[1] - t * direction[1], w[2] - t * direction[2]];
                if self.loss(&trial) <= loss + 1e-4 * t * slope || t < 1e-12 {
                    w = trial;
                    break;
                }
                t *= 0.5;
            }
        }
        Err(Error::NoConvergence { iterations: BETA_MAX_ITERS, gradient_norm: grad_norm })
    }
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let mut m = [[0.0; 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&a[i]);
        m[i][3] = b[i];
    }
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        for r in 0..3 {
            if r != col {
                let f = m[r][col] / m[col][col];
                for k in col..4 {
                    m[r][k] -= f * m[col][k];
                }
            }
        }
    }
    Some([m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]])
}

/// Maximum-likelihood beta calibration with `a, b >= 0`: whichever of `a`
/// or `b` comes out negative is pinned at zero and the fit repeated.
pub fn fit_beta(pairs: &[(f64, u8)]) -> Result<BetaMap> {
    if pairs.len() < BETA_MIN_PAIRS {
        return Err(Error::InsufficientData(format!(
            "beta calibration needs at least {BETA_MIN_PAIRS} pairs, got {}",
            pairs.len()
        )));
    }
    if pairs.iter().any(|(p, _)| !p.is_finite()) {
        return Err(Error::validation("scores", "non-finite probability in beta calibration input"));
    }
    let rows = pairs
        .iter()
        .map(|&(p, y)| {
            let [x1, x2] = features(p);
            ([x1, x2, 1.0], y as f64)
        })
        .collect();
    let mut problem = Problem { rows, free: [true; 3] };
    let mut start = [1.0, 1.0, 0.0];
    loop {
        let w = problem.minimize(start)?;
        let worst = if w[0] < 0.0 && w[0] <= w[1] {
            Some(0)
        } else if w[1] < 0.0 {
            Some(1)
        } else if w[0] < 0.0 {
            Some(0)
        } else {
            None
        };
        match worst {
            None => return Ok(BetaMap { a: w[0].max(0.0), b: w[1].max(0.0), c: w[2] }),
            Some(i) => {
                problem.free[i] = false;
                start = w;
                start[i] = 0.0;
            }
        }
    }
}
