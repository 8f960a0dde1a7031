use flowscale_align::AlignError;
use flowscale_climate::ClimateError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<ClimateError> for CliError {
    fn from(e: ClimateError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AlignError> for CliError {
    fn from(e: AlignError) -> Self {
        if let Some(reason) = e.numeric_failure() {
            return CliError::Numeric(reason);
        }
        match e {
            AlignError::Config(m) => CliError::Config(m),
            AlignError::Diverged { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
