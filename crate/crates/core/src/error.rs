use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: lo ({lo}) must be < hi ({hi})")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("invalid standard deviation {0}")]
    InvalidStddev(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid noise spec: {0}")]
    InvalidNoise(String),
    #[error("stale perturbation record: {0}")]
    StaleRecord(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("quadrature needs m <= 3, got m = {0}")]
    DimensionTooHigh(usize),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { path: PathBuf, found: u32, expected: u32 },
    #[error("{0}: truncated file")]
    Truncated(PathBuf),
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
