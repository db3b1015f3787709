//! Calibration of bird's-eye-view occupancy forecasts: synthetic data,
//! object extraction, matching, pixel-wise and object-wise calibration and
//! evaluation.
//!
//! The numeric core is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix the common choices.

// `!(a < b)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::type_complexity)]

pub mod bevg;
pub mod calibrate;
pub mod error;
pub mod evaluate;
pub mod extract;
pub mod grid;
pub mod matching;
pub mod pipeline;
pub mod region;
pub mod scalar;
pub mod split;
pub mod synth;
pub mod uncertainty;

pub use error::{Error, Result};
pub use scalar::Real;

pub type GridMeta64 = grid::GridMeta<f64>;
pub type GridMeta32 = grid::GridMeta<f32>;
pub type ProbGrid64 = grid::ProbGrid<f64>;
pub type ProbGrid32 = grid::ProbGrid<f32>;
pub type AnnotationMask64 = grid::AnnotationMask<f64>;
pub type AnnotationMask32 = grid::AnnotationMask<f32>;
pub type Gaussian64 = grid::Gaussian2D<f64>;
pub type Gaussian32 = grid::Gaussian2D<f32>;
pub type DetectedObject64 = grid::DetectedObject<f64>;
pub type DetectedObject32 = grid::DetectedObject<f32>;
pub type FrameRecord64 = grid::FrameRecord<f64>;
pub type FrameRecord32 = grid::FrameRecord<f32>;
