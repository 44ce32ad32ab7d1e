//! Subcommands of the `lsn` tool.

pub mod commands;
pub mod config;

pub use config::Config;

/// Failure of a subcommand, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<lsn_core::Error> for CliError {
    fn from(e: lsn_core::Error) -> Self {
        use lsn_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Io { .. } | E::Format { .. } | E::Dataset(_) => CliError::Io(msg),
            E::InvalidArgument { .. } | E::MissingParameter(_) | E::ShapeMismatch { .. } => CliError::Usage(msg),
            E::PrecisionRequired(_) | E::NonFinite(_) | E::Diverged { .. } => CliError::Runtime(msg),
        }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
