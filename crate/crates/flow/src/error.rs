use flowscale_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid flow architecture: {0}")]
    Architecture(String),
    #[error("input shape {got:?} does not match flow signature {expected:?}")]
    Signature { expected: Vec<usize>, got: Vec<usize> },
    #[error("layer {index} ({kind}) cannot be applied on its own")]
    NotALayer { index: usize, kind: &'static str },
}

pub type Result<T, E = FlowError> = std::result::Result<T, E>;
