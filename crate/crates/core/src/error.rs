use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CitiError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NumericFault(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing path: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CitiError {
    pub fn contract(msg: impl Into<String>) -> Self {
        CitiError::Contract(msg.into())
    }

    pub fn numeric(what: impl Into<String>) -> Self {
        CitiError::NumericFault(what.into())
    }
}

pub type Result<T, E = CitiError> = std::result::Result<T, E>;
