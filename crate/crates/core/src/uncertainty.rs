//! Object-level probabilities derived from a grid and its extracted
//! detections: presence, undetected-area mass and location quantiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AnnotatedObject, DetectedObject, FrameRecord, Gaussian2D, GridMeta, ProbGrid};
use crate::region::{CellRect, RegionSpec};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PresenceConfig {
    /// Probability mass enclosed by the location ellipse.
    pub ellipse_mass: f64,
    /// Pixels per object used to normalize summed occupancy.
    pub shape_pixels: f64,
}

impl Default for PresenceConfig {
    fn default() -> Self {
        PresenceConfig { ellipse_mass: 0.99, shape_pixels: 5.0 }
    }
}

impl PresenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ellipse_mass > 0.0 && self.ellipse_mass < 1.0) {
            return Err(Error::validation("ellipse_mass", "must lie in (0, 1)"));
        }
        if !(self.shape_pixels > 0.0 && self.shape_pixels.is_finite()) {
            return Err(Error::validation("shape_pixels", "must be positive"));
        }
        Ok(())
    }
}

/// Chi-square(2) quantile: the squared Mahalanobis radius enclosing `mass`.
pub fn chi2_2dof_quantile(mass: f64) -> f64 {
    -2.0 * (-mass).ln_1p()
}

/// Cells whose centers lie inside the `mass` ellipse of `g`, in row-major order.
pub fn ellipse_cells<T: Real>(g: &Gaussian2D<T>, mass: f64, meta: &GridMeta<T>) -> Vec<(usize, usize)> {
    let thr = T::lit(chi2_2dof_quantile(mass));
    let cov = g.cov();
    let mean = g.mean();
    let half_r = (thr * cov[0][0]).sqrt();
    let half_c = (thr * cov[1][1]).sqrt();
    let rect = CellRect::new(mean[0] - half_r, mean[0] + half_r, mean[1] - half_c, mean[1] + half_c);
    rect.cells(meta)
        .into_iter()
        .filter(|&(r, c)| g.mahalanobis_sq([T::from_usize_lossy(r), T::from_usize_lossy(c)]) <= thr)
        .collect()
}

/// `min(1, sum of probabilities inside the ellipse / shape_pixels)`.
pub fn presence_probability<T: Real>(grid: &ProbGrid<T>, g: &Gaussian2D<T>, config: &PresenceConfig) -> T {
    presence_with_shape(grid, g, config.ellipse_mass, T::lit(config.shape_pixels))
}

fn presence_with_shape<T: Real>(grid: &ProbGrid<T>, g: &Gaussian2D<T>, mass: f64, shape: T) -> T {
    let sum: T = ellipse_cells(g, mass, grid.meta())
        .into_iter()
        .map(|(r, c)| grid.get(r, c))
        .sum();
    (sum / shape).min(T::one())
}

/// Mass left in `region` after removing every detection's timestep-0 ellipse,
/// normalized by `shape_pixels` and clipped at 1.
pub fn undetected_area_probability<T: Real>(
    grid: &ProbGrid<T>,
    detections: &[DetectedObject<T>],
    region: &RegionSpec,
    config: &PresenceConfig,
) -> T {
    let meta = grid.meta();
    let rect = region.to_cell_rect(meta);
    let mut removed = vec![false; meta.num_cells()];
    for d in detections {
        if let Some(g) = d.location.get(&0) {
            for (r, c) in ellipse_cells(g, config.ellipse_mass, meta) {
                removed[meta.index(r, c)] = true;
            }
        }
    }
    let sum: T = rect
        .cells(meta)
        .into_iter()
        .filter(|&(r, c)| !removed[meta.index(r, c)])
        .fold(T::zero(), |acc, (r, c)| acc + grid.get(r, c));
    (sum / T::lit(config.shape_pixels)).min(T::one())
}

/// Fills `presence` for every timestep where a detection has a location,
/// normalizing by each detection's own `shape_pixels`.
pub fn annotate_presence<T: Real>(frame: &mut FrameRecord<T>, mass: f64) {
    let FrameRecord { grids, detections, .. } = frame;
    for d in detections.iter_mut() {
        let shape = d.shape_pixels;
        let values: Vec<(u16, T)> = d
            .location
            .iter()
            .filter_map(|(&t, g)| grids.get(t as usize).map(|grid| (t, presence_with_shape(grid, g, mass, shape))))
            .collect();
        d.presence.extend(values);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationQuantiles {
    pub detection_id: u32,
    pub timestep: u16,
    pub q_direction: f64,
    pub q_distance: f64,
}

/// Returns `(q_direction, q_distance)` for an observed point.
///
/// The distance axis `u_y` points from the ego position toward the mean and
/// the direction axis `u_x` is `u_y` rotated +90 degrees in the (row, col)
/// plane. Each quantile is the standard normal CDF of the standardized
/// projection of `point` onto that axis.
pub fn gaussian_axis_quantiles<T: Real>(g: &Gaussian2D<T>, ego: [T; 2], point: [T; 2]) -> Result<(T, T)> {
    let mean = g.mean();
    let (dr, dc) = (mean[0] - ego[0], mean[1] - ego[1]);
    let norm = (dr * dr + dc * dc).sqrt();
    if !(norm > T::zero()) {
        return Err(Error::DegenerateDirection);
    }
    let u_y = [dr / norm, dc / norm];
    let u_x = [-u_y[1], u_y[0]];
    let rel = [point[0] - ego[0], point[1] - ego[1]];
    let proj = |u: [T; 2], v: [T; 2]| u[0] * v[0] + u[1] * v[1];
    let z_y = (proj(u_y, rel) - norm) / g.directional_variance(u_y).sqrt();
    let z_x = proj(u_x, rel) / g.directional_variance(u_x).sqrt();
    Ok((z_x.std_normal_cdf(), z_y.std_normal_cdf()))
}

pub fn location_quantiles<T: Real>(
    detection: &DetectedObject<T>,
    timestep: u16,
    annotation: &AnnotatedObject<T>,
    meta: &GridMeta<T>,
) -> Result<LocationQuantiles> {
    let g = detection.location.get(&timestep).ok_or_else(|| {
        Error::validation(
            "location",
            format!("detection {} has no location at timestep {timestep}", detection.detection_id),
        )
    })?;
    let (ar, ac) = annotation.center();
    let (qx, qy) = gaussian_axis_quantiles(g, [meta.ego_row, meta.ego_col], [ar, ac])?;
    Ok(LocationQuantiles {
        detection_id: detection.detection_id,
        timestep,
        q_direction: qx.f64(),
        q_distance: qy.f64(),
    })
}
