//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid cluster spec: {0}")]
    InvalidSpec(String),

    #[error("invalid routing: {0}")]
    InvalidRouting(String),

    #[error("invalid placement: {0}")]
    InvalidPlacement(String),

    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("invalid workload script: {0}")]
    InvalidScript(String),

    #[error("empty workload")]
    EmptyWorkload,

    #[error("instance too large for oracle: {0}")]
    OracleLimit(String),

    #[error("prediction/layer misalignment: {0}")]
    PredictionMisaligned(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("replica slot budget exceeded on rank {rank} at layer {layer}: need {needed}, budget {budget}")]
    SlotBudget {
        rank: usize,
        layer: usize,
        needed: usize,
        budget: usize,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
