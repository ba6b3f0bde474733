//! Error taxonomy shared across the crate.
//!
//! Exit-code mapping for the CLI lives in `main.rs`: validation errors
//! exit 1, numeric failures exit 2, I/O failures exit 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HsaError {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("config validation failed: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HsaError>;

impl HsaError {
    /// Process exit code class for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HsaError::ShapeMismatch { .. }
            | HsaError::InvalidArgument { .. }
            | HsaError::Config(_) => 1,
            HsaError::Numeric(_) => 2,
            HsaError::Checkpoint(_) | HsaError::Io(_) | HsaError::Serde(_) => 3,
        }
    }
}
