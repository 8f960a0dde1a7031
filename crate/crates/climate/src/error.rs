use std::path::{Path, PathBuf};

use flowscale_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClimateError {
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("calendar error: {0}")]
    Calendar(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl ClimateError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ClimateError::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T, E = ClimateError> = std::result::Result<T, E>;
