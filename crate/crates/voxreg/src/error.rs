//! Crate-wide error type.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the volume, transform, objective,
/// registration, evaluation and cohort layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Underlying I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Structurally malformed file contents (bad magic, truncated payload, ...).
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Well-formed input using a feature this crate does not handle.
    #[error("unsupported input: {0}")]
    Unsupported(String),

    /// Grid dimensions or geometries that do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Transform that cannot be applied (singular linear part, ...).
    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    /// Caller-supplied argument or configuration out of its documented domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Input that is formally valid but carries no usable information
    /// (all-zero differences, empty masks, constant regressor, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Optimization could not produce a usable transform.
    #[error("registration failed: {0}")]
    RegistrationFailed(String),

    /// Loss became non-finite during optimization.
    #[error("optimization diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    /// A Jacobian-determinant statistic was requested on a folded field.
    #[error("non-invertible field: {0}")]
    NonInvertibleField(String),
}

impl Error {
    /// Wraps a raw I/O error with the file it concerned.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Shorthand for a format error on a given file.
    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
