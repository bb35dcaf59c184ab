use thiserror::Error;

use crate::field::Units;
use crate::sampler::Trajectory;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("unit mismatch: expected {expected}, got {got}")]
    UnitMismatch { expected: Units, got: Units },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("tensor format error: {0}")]
    TensorFormat(String),

    #[error("call order violation: {0}")]
    CallOrder(String),

    /// Generation produced a non-finite field; carries what was integrated so
    /// far so the failure can be inspected.
    #[error("sampling aborted at step {step} (sigma {sigma}): non-finite field")]
    SamplerAbort {
        step: usize,
        sigma: f64,
        trajectory: Box<Trajectory>,
    },

    /// Training hit a non-finite loss; the last finite parameter state is
    /// preserved for inspection.
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged {
        epoch: usize,
        last_good: Box<crate::network::ParamVector>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
