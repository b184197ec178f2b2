use emai_core::EmaiError;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("incompatible: {0}")]
    Incompatible(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Incompatible(_) => 5,
            CliError::Other(_) => 1,
        }
    }
}

impl From<EmaiError> for CliError {
    fn from(e: EmaiError) -> Self {
        let msg = e.to_string();
        match e {
            EmaiError::NonFinite(_) => CliError::Numeric(msg),
            EmaiError::Incompatible(_) | EmaiError::Checkpoint(_) => CliError::Incompatible(msg),
            EmaiError::InvalidArgument(_) => CliError::Config(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
