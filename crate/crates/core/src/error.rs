use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch { context: &'static str, left: (usize, usize), right: (usize, usize) },

    #[error("non-finite value at index {index} in {context}")]
    NonFinite { context: &'static str, index: usize },

    #[error("value {value} at index {index} in {context} lies outside [-1, 1]")]
    OutOfRange { context: &'static str, index: usize, value: f64 },

    #[error("{context} is {height}x{width}; minimum is {min}x{min}")]
    TooSmall { context: &'static str, height: usize, width: usize, min: usize },

    #[error("normalization bounds require hi > lo, got lo={lo}, hi={hi}")]
    InvalidBounds { lo: f64, hi: f64 },

    #[error("invalid {what}: {reason}")]
    InvalidParam { what: &'static str, reason: String },

    #[error("field inversion did not converge after {iterations} iterations (residual {residual:.4} px)")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("foreground mask is empty")]
    EmptyMask,

    #[error("non-finite {term} loss at step {step}: {detail}")]
    NonFiniteLoss { term: String, step: u64, detail: String },

    #[error("checkpoint format version {found}, this build reads version {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("image codec error on {path}: {source}")]
    Codec { path: PathBuf, source: image::ImageError },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NotConverged { .. } | Error::NonFiniteLoss { .. } => ErrorClass::Numeric,
            Error::InvalidParam { .. } | Error::InvalidBounds { .. } | Error::Config(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam { what, reason: reason.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
