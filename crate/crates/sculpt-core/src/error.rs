//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A heightfield violated its invariants (non-finite values, out-of-range
    /// depths, shape/extent mismatches).
    #[error("invalid heightfield: {0}")]
    InvalidField(String),

    /// An action parameter fell outside its configured bounds.
    #[error("invalid action: {0}")]
    InvalidAction(String),

    /// Bad configuration (unknown preset, inconsistent dimensions, ...).
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Two grids that must share a shape did not.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// A computation produced a non-finite value.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// An operation received an empty input it cannot handle.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Malformed on-disk data (bad magic, truncated file, bad JSON).
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
