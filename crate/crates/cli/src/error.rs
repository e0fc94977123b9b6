use realign_core::selftrain::RunFailure;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] realign_core::Error),

    #[error("{0}")]
    Usage(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Run(Box<RunFailure>),
}

impl From<RunFailure> for CliError {
    fn from(failure: RunFailure) -> Self {
        CliError::Run(Box::new(failure))
    }
}

/// What the process prints on stderr when a command fails.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Run(f) => f.error.code(),
        }
    }

    /// 2 for bad input, 1 for a computation that failed on valid input.
    pub fn exit_code(&self) -> i32 {
        let input = match self {
            CliError::Core(e) => e.is_input_error(),
            CliError::Usage(_) | CliError::Config(_) => true,
            CliError::Run(f) => f.error.is_input_error(),
        };
        if input {
            2
        } else {
            1
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport { code: self.code(), message: self.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
