use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A pixel, texel or image dimension outside its valid range.
    #[error("out of bounds: {0}")]
    Bounds(String),

    /// Input data violating a documented invariant.
    #[error("validation failed: {0}")]
    Validation(String),

    /// Two buffers that must agree in shape do not.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    /// An operation was called in the wrong state (e.g. backward without forward cache).
    #[error("invalid state: {0}")]
    State(String),

    #[error("noise provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn shape(expected: impl std::fmt::Display, actual: impl std::fmt::Display) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Bounds(_)
                | Error::Validation(_)
                | Error::Shape { .. }
                | Error::Format { .. }
                | Error::Json(_)
        )
    }
}
