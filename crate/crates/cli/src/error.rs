use thiserror::Error;

/// Failure of a subcommand, carrying the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(#[from] flowmatch::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Checkpoint(_) | CliError::Argument(_) => 2,
            CliError::Core(flowmatch::Error::InvalidArgument(_)) => 2,
            CliError::Core(flowmatch::Error::NonFiniteLoss { .. }) => 3,
            CliError::CheckFailed(_) | CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
