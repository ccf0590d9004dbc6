use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] fagan::error::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 1 for usage and configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Core(fagan::error::Error::Config(_)) => 1,
            CliError::Core(_) => 2,
        }
    }
}
