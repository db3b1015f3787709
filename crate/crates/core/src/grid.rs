//! Grid, annotation and detection data model.
//!
//! Grid coordinates are `(row, col)` in cell units, with the center of cell
//! `(r, c)` located at exactly `(r, c)`. Rows increase in the forward
//! direction of the ego vehicle and columns increase laterally.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Spatial layout shared by every grid and annotation of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", deny_unknown_fields)]
pub struct GridMeta<T: Real> {
    pub height_cells: usize,
    pub width_cells: usize,
    /// Meters per cell side.
    pub cell_size_m: T,
    pub ego_row: T,
    pub ego_col: T,
    pub num_future_steps: u16,
    pub step_seconds: T,
}

impl<T: Real> GridMeta<T> {
    pub fn new(
        height_cells: usize,
        width_cells: usize,
        cell_size_m: T,
        ego_row: T,
        ego_col: T,
        num_future_steps: u16,
        step_seconds: T,
    ) -> Result<Self> {
        let meta = GridMeta {
            height_cells,
            width_cells,
            cell_size_m,
            ego_row,
            ego_col,
            num_future_steps,
            step_seconds,
        };
        meta.validate()?;
        Ok(meta)
    }

    /// A 200x200 grid of 0.5 m cells with the ego vehicle at the grid center
    /// and four future timesteps of one second.
    pub fn default_bev() -> Self {
        GridMeta {
            height_cells: 200,
            width_cells: 200,
            cell_size_m: T::lit(0.5),
            ego_row: T::lit(99.5),
            ego_col: T::lit(99.5),
            num_future_steps: 4,
            step_seconds: T::one(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height_cells == 0 || self.width_cells == 0 {
            return Err(Error::validation("grid dimensions", "must be positive"));
        }
        if self.height_cells > u16::MAX as usize + 1 || self.width_cells > u16::MAX as usize + 1 {
            return Err(Error::validation("grid dimensions", "must fit 16-bit cell indices"));
        }
        if !(self.cell_size_m.is_finite() && self.cell_size_m > T::zero()) {
            return Err(Error::validation("cell_size_m", "must be positive and finite"));
        }
        if !(self.step_seconds.is_finite() && self.step_seconds > T::zero()) {
            return Err(Error::validation("step_seconds", "must be positive and finite"));
        }
        let h = T::from_usize_lossy(self.height_cells);
        let w = T::from_usize_lossy(self.width_cells);
        if !(self.ego_row >= T::zero() && self.ego_row < h) {
            return Err(Error::validation("ego_row", "must lie in [0, height_cells)"));
        }
        if !(self.ego_col >= T::zero() && self.ego_col < w) {
            return Err(Error::validation("ego_col", "must lie in [0, width_cells)"));
        }
        Ok(())
    }

    #[inline]
    pub fn num_cells(&self) -> usize {
        self.height_cells * self.width_cells
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width_cells + col
    }

    pub fn num_timesteps(&self) -> usize {
        self.num_future_steps as usize + 1
    }

    /// Converts an ego-relative position in meters (forward, lateral) to grid coordinates.
    pub fn meters_to_grid(&self, forward_m: T, lateral_m: T) -> (T, T) {
        (
            self.ego_row + forward_m / self.cell_size_m,
            self.ego_col + lateral_m / self.cell_size_m,
        )
    }
}

/// Per-cell occupancy probabilities for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid<T: Real> {
    meta: GridMeta<T>,
    timestep: u16,
    cells: Vec<T>,
}

impl<T: Real> ProbGrid<T> {
    pub fn new(meta: GridMeta<T>, timestep: u16, cells: Vec<T>) -> Result<Self> {
        meta.validate()?;
        if timestep > meta.num_future_steps {
            return Err(Error::validation(
                "timestep",
                format!("{timestep} exceeds num_future_steps {}", meta.num_future_steps),
            ));
        }
        if cells.len() != meta.num_cells() {
            return Err(Error::validation(
                "cells",
                format!("expected {} cells, got {}", meta.num_cells(), cells.len()),
            ));
        }
        if let Some(i) = cells
            .iter()
            .position(|p| !(p.is_finite() && *p >= T::zero() && *p <= T::one()))
        {
            return Err(Error::validation(
                "cells",
                format!(
                    "cell probability out of range at index {i}: {}",
                    cells[i]
                ),
            ));
        }
        Ok(ProbGrid {
            meta,
            timestep,
            cells,
        })
    }

    pub fn zeros(meta: GridMeta<T>, timestep: u16) -> Result<Self> {
        Self::new(meta, timestep, vec![T::zero(); meta.num_cells()])
    }

    pub fn meta(&self) -> &GridMeta<T> {
        &self.meta
    }

    pub fn timestep(&self) -> u16 {
        self.timestep
    }

    pub fn cells(&self) -> &[T] {
        &self.cells
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.cells[self.meta.index(row, col)]
    }

    /// Iterates `(row, col, probability)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        let w = self.meta.width_cells;
        self.cells
            .iter()
            .enumerate()
            .map(move |(i, &p)| (i / w, i % w, p))
    }

    /// Applies `f` to every cell, re-validating the result.
    pub fn map_cells(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(
            self.meta,
            self.timestep,
            self.cells.iter().map(|&p| f(p)).collect(),
        )
    }

    pub fn into_cells(self) -> Vec<T> {
        self.cells
    }
}

/// Ground-truth object footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedObject<T: Real> {
    pub object_id: u32,
    center_row: T,
    center_col: T,
    pixels: Vec<(u16, u16)>,
}

impl<T: Real> AnnotatedObject<T> {
    /// Builds an annotation whose center is the mean of its pixel coordinates.
    pub fn from_pixels(object_id: u32, pixels: Vec<(u16, u16)>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::validation("pixels", "annotation must have at least one pixel"));
        }
        let (center_row, center_col) = pixel_mean(&pixels);
        Ok(AnnotatedObject {
            object_id,
            center_row,
            center_col,
            pixels,
        })
    }

    /// Builds an annotation from a stored center, checking that it agrees with
    /// the pixel mean to within `tolerance`.
    pub fn with_center(
        object_id: u32,
        center_row: T,
        center_col: T,
        pixels: Vec<(u16, u16)>,
        tolerance: T,
    ) -> Result<Self> {
        let obj = Self::from_pixels(object_id, pixels)?;
        if (obj.center_row - center_row).abs() > tolerance
            || (obj.center_col - center_col).abs() > tolerance
        {
            return Err(Error::validation(
                "center",
                format!(
                    "object {object_id}: stored center ({center_row}, {center_col}) differs from pixel mean ({}, {})",
                    obj.center_row, obj.center_col
                ),
            ));
        }
        Ok(obj)
    }

    pub fn center(&self) -> (T, T) {
        (self.center_row, self.center_col)
    }

    pub fn pixels(&self) -> &[(u16, u16)] {
        &self.pixels
    }
}

fn pixel_mean<T: Real>(pixels: &[(u16, u16)]) -> (T, T) {
    let n = T::from_usize_lossy(pixels.len());
    let (sr, sc) = pixels.iter().fold((T::zero(), T::zero()), |(sr, sc), &(r, c)| {
        (sr + T::lit(r as f64), sc + T::lit(c as f64))
    });
    (sr / n, sc / n)
}

/// Ground-truth occupancy for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationMask<T: Real> {
    meta: GridMeta<T>,
    timestep: u16,
    occupied: Vec<bool>,
    instances: Vec<AnnotatedObject<T>>,
}

impl<T: Real> AnnotationMask<T> {
    pub fn new(
        meta: GridMeta<T>,
        timestep: u16,
        occupied: Vec<bool>,
        instances: Vec<AnnotatedObject<T>>,
    ) -> Result<Self> {
        meta.validate()?;
        if occupied.len() != meta.num_cells() {
            return Err(Error::validation(
                "occupied",
                format!("expected {} cells, got {}", meta.num_cells(), occupied.len()),
            ));
        }
        for obj in &instances {
            for &(r, c) in obj.pixels() {
                let (r, c) = (r as usize, c as usize);
                if r >= meta.height_cells || c >= meta.width_cells {
                    return Err(Error::validation(
                        "instances",
                        format!("object {} pixel ({r}, {c}) outside grid", obj.object_id),
                    ));
                }
                if !occupied[meta.index(r, c)] {
                    return Err(Error::validation(
                        "instances",
                        format!("object {} pixel ({r}, {c}) not marked occupied", obj.object_id),
                    ));
                }
            }
        }
        Ok(AnnotationMask {
            meta,
            timestep,
            occupied,
            instances,
        })
    }

    /// Builds a mask whose occupancy is exactly the union of the instance footprints.
    pub fn from_instances(
        meta: GridMeta<T>,
        timestep: u16,
        instances: Vec<AnnotatedObject<T>>,
    ) -> Result<Self> {
        let mut occupied = vec![false; meta.num_cells()];
        for obj in &instances {
            for &(r, c) in obj.pixels() {
                let (r, c) = (r as usize, c as usize);
                if r < meta.height_cells && c < meta.width_cells {
                    occupied[meta.index(r, c)] = true;
                }
            }
        }
        Self::new(meta, timestep, occupied, instances)
    }

    pub fn empty(meta: GridMeta<T>, timestep: u16) -> Result<Self> {
        Self::new(meta, timestep, vec![false; meta.num_cells()], Vec::new())
    }

    pub fn meta(&self) -> &GridMeta<T> {
        &self.meta
    }

    pub fn timestep(&self) -> u16 {
        self.timestep
    }

    pub fn occupied(&self) -> &[bool] {
        &self.occupied
    }

    pub fn instances(&self) -> &[AnnotatedObject<T>] {
        &self.instances
    }

    #[inline]
    pub fn is_occupied(&self, row: usize, col: usize) -> bool {
        self.occupied[self.meta.index(row, col)]
    }
}

/// Bivariate Gaussian in grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Gaussian2D<T: Real> {
    mean: [T; 2],
    cov: [[T; 2]; 2],
}

impl<T: Real> Gaussian2D<T> {
    pub fn new(mean: [T; 2], cov: [[T; 2]; 2]) -> Result<Self> {
        if !(mean[0].is_finite() && mean[1].is_finite()) {
            return Err(Error::validation("mean", "must be finite"));
        }
        let scale = T::one().max(cov[0][1].abs()).max(cov[1][0].abs());
        if (cov[0][1] - cov[1][0]).abs() > T::lit(1e-12) * scale {
            return Err(Error::validation("cov", "must be symmetric"));
        }
        let g = Gaussian2D { mean, cov };
        let (l1, l2) = g.eigenvalues();
        if !(l1.is_finite() && l2.is_finite() && l1 > T::zero() && l2 > T::zero()) {
            return Err(Error::validation("cov", "must be positive definite"));
        }
        Ok(g)
    }

    pub fn isotropic(mean: [T; 2], variance: T) -> Result<Self> {
        Self::new(mean, [[variance, T::zero()], [T::zero(), variance]])
    }

    pub fn mean(&self) -> [T; 2] {
        self.mean
    }

    pub fn cov(&self) -> [[T; 2]; 2] {
        self.cov
    }

    pub fn det(&self) -> T {
        self.cov[0][0] * self.cov[1][1] - self.cov[0][1] * self.cov[1][0]
    }

    /// Eigenvalues of the covariance, largest first.
    pub fn eigenvalues(&self) -> (T, T) {
        let half_tr = (self.cov[0][0] + self.cov[1][1]) / T::lit(2.0);
        let half_diff = (self.cov[0][0] - self.cov[1][1]) / T::lit(2.0);
        let r = (half_diff * half_diff + self.cov[0][1] * self.cov[1][0]).sqrt();
        (half_tr + r, half_tr - r)
    }

    /// Angle (radians, in the row/col plane measured from the row axis) of the major axis.
    pub fn major_axis_angle(&self) -> T {
        T::lit(0.5) * (T::lit(2.0) * self.cov[0][1]).atan2(self.cov[0][0] - self.cov[1][1])
    }

    pub fn inverse_cov(&self) -> [[T; 2]; 2] {
        let d = self.det();
        [
            [self.cov[1][1] / d, -self.cov[0][1] / d],
            [-self.cov[1][0] / d, self.cov[0][0] / d],
        ]
    }

    /// Squared Mahalanobis distance of `point` from the mean.
    pub fn mahalanobis_sq(&self, point: [T; 2]) -> T {
        let inv = self.inverse_cov();
        let dr = point[0] - self.mean[0];
        let dc = point[1] - self.mean[1];
        dr * (inv[0][0] * dr + inv[0][1] * dc) + dc * (inv[1][0] * dr + inv[1][1] * dc)
    }

    /// Variance of the projection onto the unit vector `u`.
    pub fn directional_variance(&self, u: [T; 2]) -> T {
        u[0] * (self.cov[0][0] * u[0] + self.cov[0][1] * u[1])
            + u[1] * (self.cov[1][0] * u[0] + self.cov[1][1] * u[1])
    }
}

/// A mixture component: Gaussian plus its mixing weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedGaussian<T: Real> {
    pub weight: T,
    pub gaussian: Gaussian2D<T>,
}

/// One extracted object across timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectedObject<T: Real> {
    pub detection_id: u32,
    pub location: BTreeMap<u16, Gaussian2D<T>>,
    pub presence: BTreeMap<u16, T>,
    pub shape_pixels: T,
    pub matched_annotations: BTreeMap<u16, Vec<u32>>,
}

impl<T: Real> DetectedObject<T> {
    pub fn new(detection_id: u32, shape_pixels: T) -> Self {
        DetectedObject {
            detection_id,
            location: BTreeMap::new(),
            presence: BTreeMap::new(),
            shape_pixels,
            matched_annotations: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shape_pixels > T::zero()) {
            return Err(Error::validation("shape_pixels", "must be positive"));
        }
        for (t, p) in &self.presence {
            if !(*p >= T::zero() && *p <= T::one()) {
                return Err(Error::validation(
                    "presence",
                    format!("detection {} timestep {t}: {p} outside [0, 1]", self.detection_id),
                ));
            }
            if !self.location.contains_key(t) {
                return Err(Error::validation(
                    "presence",
                    format!("detection {} has presence but no location at timestep {t}", self.detection_id),
                ));
            }
        }
        Ok(())
    }
}

/// A frame: current plus future grids with their annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord<T: Real> {
    pub frame_id: String,
    pub episode_id: String,
    /// Indexed by timestep `0..=num_future_steps`.
    pub grids: Vec<ProbGrid<T>>,
    /// Indexed by timestep `0..=num_future_steps`.
    pub annotations: Vec<AnnotationMask<T>>,
    pub detections: Vec<DetectedObject<T>>,
}

impl<T: Real> FrameRecord<T> {
    pub fn new(
        frame_id: impl Into<String>,
        episode_id: impl Into<String>,
        grids: Vec<ProbGrid<T>>,
        annotations: Vec<AnnotationMask<T>>,
    ) -> Result<Self> {
        let rec = FrameRecord {
            frame_id: frame_id.into(),
            episode_id: episode_id.into(),
            grids,
            annotations,
            detections: Vec::new(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn meta(&self) -> &GridMeta<T> {
        self.grids[0].meta()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.grids.first() else {
            return Err(Error::validation("grids", "frame has no grids"));
        };
        let meta = *first.meta();
        meta.validate()?;
        if self.grids.len() != meta.num_timesteps() {
            return Err(Error::validation(
                "grids",
                format!("expected {} timesteps, got {}", meta.num_timesteps(), self.grids.len()),
            ));
        }
        if self.annotations.len() != self.grids.len() {
            return Err(Error::validation(
                "annotations",
                "annotation timesteps must match grid timesteps",
            ));
        }
        for (t, (g, a)) in self.grids.iter().zip(&self.annotations).enumerate() {
            if g.meta() != &meta || a.meta() != &meta {
                return Err(Error::validation("meta", "all grids and annotations must share one GridMeta"));
            }
            if g.timestep() as usize != t || a.timestep() as usize != t {
                return Err(Error::validation("timestep", format!("entry {t} has mismatched timestep")));
            }
        }
        for d in &self.detections {
            d.validate()?;
        }
        Ok(())
    }

    pub fn grid(&self, timestep: u16) -> Option<&ProbGrid<T>> {
        self.grids.get(timestep as usize)
    }

    pub fn annotation(&self, timestep: u16) -> Option<&AnnotationMask<T>> {
        self.annotations.get(timestep as usize)
    }
}
