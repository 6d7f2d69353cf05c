use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    #[error("step {step} out of range (max {max})")]
    StepOutOfRange { step: usize, max: usize },

    #[error("sigma must lie in (0, 1/2], got {0}")]
    BadSigma(f64),

    #[error("least-squares basis is rank deficient")]
    RankDeficientBasis,

    #[error("non-finite value encountered at step {step}")]
    Diverged { step: usize },

    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
