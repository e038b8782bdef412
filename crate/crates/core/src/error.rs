//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad construction parameters (sizes, fractions, targets out of range).
    #[error("configuration error: {0}")]
    Config(String),
    /// Bad runtime input (out-of-range ids, mismatched lengths, empty data).
    #[error("input error: {0}")]
    Input(String),
    /// API misuse (stale caches, mismatched provenance).
    #[error("usage error: {0}")]
    Usage(String),
    /// Degenerate numerics (zero variance, NaN losses).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Curve fitting failed to converge for every candidate family.
    #[error("fit error: {0}")]
    Fit(String),
    /// Training aborted (divergence, NaN gradients).
    #[error("training aborted: {0}")]
    Training(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
