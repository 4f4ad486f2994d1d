//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the segmentation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with inputs that violate its contract
    /// (shape mismatch, out-of-bounds point, empty family, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file did not match its on-disk format.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A run configuration failed validation. `path` names the offending field.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// Non-finite values appeared in a computation (divergence symptom).
    #[error("non-finite values in {0}")]
    NonFiniteValues(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
