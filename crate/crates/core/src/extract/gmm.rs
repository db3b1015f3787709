//! Weighted expectation-maximization for 2D Gaussian mixtures.

use crate::error::Result;
use crate::grid::{Gaussian2D, WeightedGaussian};
use crate::scalar::Real;

use super::{ExtractionConfig, SamplePoints};

/// Result of one mixture fit.
#[derive(Debug, Clone)]
pub struct GmmFit<T: Real> {
    pub components: Vec<WeightedGaussian<T>>,
    /// Weighted log-likelihood evaluated at the start of every iteration and
    /// at the returned parameters.
    pub log_likelihood_trace: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Real> GmmFit<T> {
    fn empty() -> Self {
        GmmFit {
            components: Vec::new(),
            log_likelihood_trace: Vec::new(),
            iterations: 0,
            converged: true,
        }
    }

    pub fn final_log_likelihood(&self) -> Option<T> {
        self.log_likelihood_trace.last().copied()
    }
}

#[derive(Clone, Copy)]
struct Component<T: Real> {
    weight: T,
    mean: [T; 2],
    cov: [[T; 2]; 2],
}

impl<T: Real> Component<T> {
    fn det(&self) -> T {
        self.cov[0][0] * self.cov[1][1] - self.cov[0][1] * self.cov[1][0]
    }
}

/// Fits a `K`-component mixture initialized at `seeds`, where `K` is the
/// number of seeds capped at the number of distinct sample points.
///
/// Components start with isotropic covariance `(min_seed_separation_cells / 2)^2`
/// and uniform weights. Every M-step adds `cov_reg * I` to each covariance.
/// Iteration stops once the log-likelihood gain drops below
/// `em_tol * |log-likelihood|` or after `em_max_iters` M-steps.
pub fn fit_gmm<T: Real>(
    points: &SamplePoints<T>,
    seeds: &[(usize, usize)],
    config: &ExtractionConfig,
) -> Result<GmmFit<T>> {
    config.validate()?;
    let k = seeds.len().min(points.points.len());
    if k == 0 {
        return Ok(GmmFit::empty());
    }
    let reg = T::lit(config.cov_reg);
    let init_var = T::lit((config.min_seed_separation_cells / 2.0).powi(2));
    let mut comps: Vec<Component<T>> = seeds[..k]
        .iter()
        .map(|&(r, c)| Component {
            weight: T::one() / T::from_usize_lossy(k),
            mean: [T::from_usize_lossy(r), T::from_usize_lossy(c)],
            cov: [[init_var, T::zero()], [T::zero(), init_var]],
        })
        .collect();

    let xs: Vec<[T; 2]> = points.points.iter().map(|p| [p.row, p.col]).collect();
    let ws: Vec<T> = points
        .points
        .iter()
        .map(|p| T::lit(p.multiplicity as f64))
        .collect();
    let total_w: T = ws.iter().copied().sum();

    let mut resp = vec![T::zero(); xs.len() * k];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let ll = e_step(&comps, &xs, &ws, &mut resp);
        if let Some(&prev) = trace.last() {
            trace.push(ll);
            if ll - prev < T::lit(config.em_tol) * prev.abs() {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }
        if iterations == config.em_max_iters {
            break;
        }
        m_step(&mut comps, &xs, &ws, &resp, total_w, reg);
        iterations += 1;
    }

    let weight_sum: T = comps.iter().map(|c| c.weight).sum();
    let components = comps
        .iter()
        .map(|c| {
            Ok(WeightedGaussian {
                weight: c.weight / weight_sum,
                gaussian: Gaussian2D::new(c.mean, c.cov)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GmmFit {
        components,
        log_likelihood_trace: trace,
        iterations,
        converged,
    })
}

/// Fills `resp` (row-major, points x components) and returns the weighted log-likelihood.
fn e_step<T: Real>(comps: &[Component<T>], xs: &[[T; 2]], ws: &[T], resp: &mut [T]) -> T {
    let k = comps.len();
    let half = T::lit(0.5);
    let log_2pi = T::lit((2.0 * std::f64::consts::PI).ln());
    // Per-component constants: log weight - log(2 pi) - log|S|/2, and the inverse covariance.
    let pre: Vec<(T, [[T; 2]; 2])> = comps
        .iter()
        .map(|c| {
            let det = c.det();
            let inv = [
                [c.cov[1][1] / det, -c.cov[0][1] / det],
                [-c.cov[1][0] / det, c.cov[0][0] / det],
            ];
            let log_w = if c.weight > T::zero() {
                c.weight.ln()
            } else {
                T::neg_infinity()
            };
            (log_w - log_2pi - half * det.ln(), inv)
        })
        .collect();

    let mut ll = T::zero();
    for (i, (x, &w)) in xs.iter().zip(ws).enumerate() {
        let row = &mut resp[i * k..(i + 1) * k];
        let mut max = T::neg_infinity();
        for (j, (c, (lc, inv))) in comps.iter().zip(&pre).enumerate() {
            let dr = x[0] - c.mean[0];
            let dc = x[1] - c.mean[1];
            let maha = dr * (inv[0][0] * dr + inv[0][1] * dc) + dc * (inv[1][0] * dr + inv[1][1] * dc);
            row[j] = *lc - half * maha;
            max = max.max(row[j]);
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        ll += w * (max + sum.ln());
    }
    ll
}

fn m_step<T: Real>(
    comps: &mut [Component<T>],
    xs: &[[T; 2]],
    ws: &[T],
    resp: &[T],
    total_w: T,
    reg: T,
) {
    let k = comps.len();
    let tiny = T::epsilon() * total_w;
    for (j, comp) in comps.iter_mut().enumerate() {
        let mut nk = T::zero();
        let mut sr = T::zero();
        let mut sc = T::zero();
        for (i, (x, &w)) in xs.iter().zip(ws).enumerate() {
            let wr = w * resp[i * k + j];
            nk += wr;
            sr += wr * x[0];
            sc += wr * x[1];
        }
        comp.weight = nk / total_w;
        if nk <= tiny {
            // Dead component: keep its location and shape, weight goes to zero.
            continue;
        }
        let mean = [sr / nk, sc / nk];
        let (mut s00, mut s01, mut s11) = (T::zero(), T::zero(), T::zero());
        for (i, (x, &w)) in xs.iter().zip(ws).enumerate() {
            let wr = w * resp[i * k + j];
            let dr = x[0] - mean[0];
            let dc = x[1] - mean[1];
            s00 += wr * dr * dr;
            s01 += wr * dr * dc;
            s11 += wr * dc * dc;
        }
        let mut cov = [[s00 / nk + reg, s01 / nk], [s01 / nk, s11 / nk + reg]];
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        if !(det >= reg * reg) {
            cov[0][0] += reg;
            cov[1][1] += reg;
        }
        comp.mean = mean;
        comp.cov = cov;
    }
}
