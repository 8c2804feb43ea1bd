use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument or configuration value is outside its valid domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two inputs that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed text input (gradient tables, config values).
    #[error("parse error: {0}")]
    Parse(String),

    /// The least-squares design is rank deficient.
    #[error("ill-conditioned design: {0}")]
    Conditioning(String),

    /// A loss or output became NaN or infinite.
    #[error("non-finite value in {term} (step {step:?}, batch index {batch_index:?})")]
    NonFinite {
        term: String,
        step: Option<u64>,
        batch_index: Option<usize>,
    },

    /// A stored artifact has an unknown or incompatible format.
    #[error("format error: {0}")]
    Format(String),

    /// Stored content does not match its recorded digest or length.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
