use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: needed {needed} more bytes at offset {offset}")]
    Length { offset: usize, needed: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Split(String),

    #[error("degenerate direction: detection mean coincides with the ego position")]
    DegenerateDirection,

    #[error("beta calibration did not converge after {iterations} iterations (gradient norm {gradient_norm:e})")]
    NoConvergence { iterations: usize, gradient_norm: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("split leakage: frames {0:?} used for fitting and evaluation")]
    Leakage(Vec<String>),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
