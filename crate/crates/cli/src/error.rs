use std::process::ExitCode;

use fedsel_core::advisor::AdvisorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Transport(String),
    #[error("{message}")]
    Exhausted {
        message: String,
        raw_responses: Vec<String>,
    },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    /// 2 usage, 3 validation, 4 transport, 5 exhausted retries, 1 anything else.
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Internal(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Validation(_) => 3,
            CliError::Transport(_) => 4,
            CliError::Exhausted { .. } => 5,
        })
    }

    pub fn validation(context: &str, e: impl std::fmt::Display) -> Self {
        CliError::Validation(format!("{context}: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<AdvisorError> for CliError {
    fn from(e: AdvisorError) -> Self {
        match e {
            AdvisorError::Transport { .. } => CliError::Transport(e.to_string()),
            AdvisorError::Exhausted { ref raw_responses, .. } => CliError::Exhausted {
                raw_responses: raw_responses.clone(),
                message: e.to_string(),
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
