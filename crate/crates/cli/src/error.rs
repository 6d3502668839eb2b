use thiserror::Error;

use pixseq_core::Error as CoreError;
use pixseq_sim::SimError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("{0}")]
    Sim(#[from] SimError),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Core(CoreError::data(msg))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(CoreError::Contract(_)) => EXIT_USAGE,
            CliError::Core(CoreError::Numeric(_)) => EXIT_NUMERIC,
            CliError::Core(_) => EXIT_DATA,
            CliError::Sim(SimError::Contract(_)) => EXIT_USAGE,
            CliError::Sim(_) => EXIT_DATA,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(CoreError::Io(e))
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
