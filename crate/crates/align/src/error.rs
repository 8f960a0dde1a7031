use flowscale_flow::FlowError;
use flowscale_tensor::TensorError;
use thiserror::Error;

use crate::train::LossRecord;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at step {}: {reason}", record.step)]
    Diverged { record: Box<LossRecord>, reason: String },
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AlignError {
    /// Description of a numerical failure inside the tensor engine, which
    /// training reports as divergence.
    pub fn numeric_failure(&self) -> Option<String> {
        let t = match self {
            AlignError::Tensor(t) | AlignError::Flow(FlowError::Tensor(t)) => t,
            _ => return None,
        };
        match t {
            TensorError::NonFinite { op } => Some(format!("non-finite value in {op}")),
            TensorError::Domain { op, detail } => Some(format!("{op}: {detail}")),
            _ => None,
        }
    }
}

pub type Result<T, E = AlignError> = std::result::Result<T, E>;
