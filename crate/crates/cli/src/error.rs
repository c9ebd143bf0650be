use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Failure classes of a command, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable, malformed or invalid configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Missing or corrupt inputs, or outputs that could not be written.
    #[error("data error: {0}")]
    Data(String),

    /// A NaN or infinity appeared during computation.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        CliError::Data(format!("{}: {err}", path.into().display()))
    }
}

impl From<moesplat_core::Error> for CliError {
    fn from(e: moesplat_core::Error) -> Self {
        use moesplat_core::Error as E;
        match e {
            E::NonFinite { .. } => CliError::Numerical(e.to_string()),
            E::InvalidParameter(_) | E::InvalidSpec(_) => CliError::Config(e.to_string()),
            E::InvalidInput(_) | E::State(_) | E::Format(_) => CliError::Data(e.to_string()),
        }
    }
}
