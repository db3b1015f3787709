//! Pixel-wise isotonic, object-wise beta and quantile-map calibration, plus
//! the versioned `.calib` text format the fitted maps are stored in.

mod beta;
mod isotonic;
mod quantile;

pub use beta::{fit_beta, BetaMap, BETA_GRAD_TOL, BETA_INPUT_EPS, BETA_MAX_ITERS, BETA_MIN_PAIRS};
pub use isotonic::{fit_isotonic, fit_isotonic_iter, isotonic_fitted_values, IsotonicMap};
pub use quantile::{fit_quantile_map, QuantileMap, QUANTILE_LEVELS, QUANTILE_MIN_OBSERVATIONS};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FrameRecord, ProbGrid};
use crate::scalar::Real;

pub const CALIB_FORMAT_VERSION: u32 = 1;
pub const CALIB_EXTENSION: &str = "calib";

/// Applies `map` to every cell independently.
pub fn calibrate_grid<T: Real>(grid: &ProbGrid<T>, map: &IsotonicMap) -> Result<ProbGrid<T>> {
    grid.map_cells(|p| T::lit(map.apply(p.f64())))
}

/// Deterministic stride subsampling of grid cells: keeps cells whose
/// running index over all fitted frames is a multiple of `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelSampler {
    pub stride: usize,
}

impl Default for PixelSampler {
    fn default() -> Self {
        PixelSampler { stride: 1 }
    }
}

impl PixelSampler {
    /// `(probability, occupied)` pairs from timestep `t` of every frame.
    pub fn pixel_pairs<T: Real>(&self, frames: &[&FrameRecord<T>], t: u16) -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::new();
        let mut offset = 0usize;
        for f in frames {
            out.extend(self.frame_pairs(f, t, offset)?);
            offset += f.meta().num_cells();
        }
        Ok(out)
    }

    /// Pairs from one frame whose cells are numbered from `offset` in the
    /// running index, so frames can be sampled independently.
    pub fn frame_pairs<T: Real>(&self, frame: &FrameRecord<T>, t: u16, offset: usize) -> Result<Vec<(f64, f64)>> {
        if self.stride == 0 {
            return Err(Error::validation("stride", "must be positive"));
        }
        let (Some(grid), Some(ann)) = (frame.grid(t), frame.annotation(t)) else {
            return Err(Error::validation("timestep", format!("frame {} has no timestep {t}", frame.frame_id)));
        };
        let first = (self.stride - offset % self.stride) % self.stride;
        Ok(grid
            .cells()
            .iter()
            .zip(ann.occupied())
            .skip(first)
            .step_by(self.stride)
            .map(|(p, &occ)| (p.f64(), occ as u8 as f64))
            .collect())
    }

    pub fn fit_pixel_map<T: Real>(&self, frames: &[&FrameRecord<T>], t: u16) -> Result<IsotonicMap> {
        fit_isotonic_iter(self.pixel_pairs(frames, t)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CalibrationMap {
    Isotonic(IsotonicMap),
    Beta(BetaMap),
    Quantile(QuantileMap),
}

impl CalibrationMap {
    pub fn kind(&self) -> &'static str {
        match self {
            CalibrationMap::Isotonic(_) => "isotonic",
            CalibrationMap::Beta(_) => "beta",
            CalibrationMap::Quantile(_) => "quantile",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CalibrationMap::Isotonic(m) => m.validate(),
            CalibrationMap::Beta(m) => m.validate(),
            CalibrationMap::Quantile(m) => m.validate(),
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        match self {
            CalibrationMap::Isotonic(m) => m.apply(x),
            CalibrationMap::Beta(m) => m.apply(x),
            CalibrationMap::Quantile(m) => m.apply(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibMeta {
    /// What the map calibrates, e.g. `pixel_t0` or `presence_t4`.
    pub target: String,
    pub num_observations: usize,
    /// Frames the map was fitted on.
    pub fitted_frames: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibFile {
    pub format_version: u32,
    pub meta: CalibMeta,
    pub map: CalibrationMap,
}

impl CalibFile {
    pub fn new(meta: CalibMeta, map: CalibrationMap) -> Self {
        CalibFile { format_version: CALIB_FORMAT_VERSION, meta, map }
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("cannot serialize calibration map: {e}")))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let file: CalibFile = toml::from_str(text).map_err(|e| Error::Format(format!("invalid calibration file: {e}")))?;
        if file.format_version != CALIB_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported calibration format version {} (expected {CALIB_FORMAT_VERSION})",
                file.format_version
            )));
        }
        file.map.validate()?;
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
