//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EvccError>;

#[derive(Debug, Error)]
pub enum EvccError {
    /// Shape or axis mismatch; the message names the offending shapes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid argument value (k out of range, bad label, non-scalar loss, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Invalid configuration (bad key, indivisible patch grid, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed on-disk data; the message carries the byte offset when known.
    #[error("format error: {0}")]
    Format(String),

    /// A forward operation produced NaN/Inf from finite inputs.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training aborted because the loss became non-finite.
    #[error("nan abort at step {step}: {detail}")]
    NanAbort { step: u64, detail: String },

    /// Gradient check failed; the message names the failing parameter group.
    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EvccError {
    /// Process exit status for the CLI. Documented in the README.
    pub fn exit_code(&self) -> i32 {
        match self {
            EvccError::Config(_) => 2,
            EvccError::Format(_) | EvccError::Io(_) => 3,
            EvccError::NanAbort { .. } | EvccError::NonFinite(_) => 4,
            EvccError::GradCheck(_) => 5,
            _ => 1,
        }
    }
}
