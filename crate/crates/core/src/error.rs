use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the editing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is singular or not positive definite (pivot {pivot} = {value:e})")]
    Singular { pivot: usize, value: f64 },

    #[error("degenerate matrix: {0}")]
    Degenerate(String),

    #[error("power iteration did not converge after {iters} iterations (last Rayleigh quotient {rayleigh})")]
    NoConvergence { iters: usize, rayleigh: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("activation cache does not match layer: {0}")]
    CacheMismatch(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    ConfigAt { path: PathBuf, line: usize, message: String },

    #[error("missing {what} at {path}; run `{stage}` first")]
    MissingArtifact { what: String, path: PathBuf, stage: &'static str },

    #[error("empty set: {0}")]
    Empty(String),

    #[error("benchmark case construction failed: {0}")]
    CaseConstruction(String),

    #[error("bad magic in checkpoint {0}")]
    BadMagic(PathBuf),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("hash mismatch for {path}: manifest {expected}, file {actual}")]
    HashMismatch { path: PathBuf, expected: String, actual: String },

    #[error("manifest validation failed: {0}")]
    Manifest(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by floating-point trouble rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. }
                | Error::NoConvergence { .. }
                | Error::Degenerate(_)
                | Error::Training(_)
                | Error::Optimization(_)
                | Error::NotSymmetric(_)
        )
    }
}
