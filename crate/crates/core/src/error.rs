use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum ImcError {
    #[error("side information not full column rank")]
    NotFullRank,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("Z not representable as XMYᵀ")]
    NotRepresentable,

    #[error("infeasible: contradictory observations")]
    Infeasible,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ImcError>;
