use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("view index {index} out of range (n_views = {n_views})")]
    ViewOutOfRange { index: usize, n_views: usize },
    #[error("point behind source (camera depth {depth:.3} mm)")]
    BehindSource { depth: f64 },
    #[error("degenerate quaternion (norm {0:e})")]
    DegenerateQuaternion(f64),
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    #[error("value {value} outside domain [{lo}, {hi})")]
    OutOfDomain { value: f64, lo: f64, hi: f64 },
    #[error("no voxel above threshold {0}")]
    EmptySupport(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stale warp cache: {0}")]
    StaleCache(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("non-finite loss {loss} at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
