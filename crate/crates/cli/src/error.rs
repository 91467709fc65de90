use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Engine(#[from] extmind::Error),

    #[error("plot: {0}")]
    Plot(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 for configuration problems, 3 for I/O, 4 when training fails, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Engine(extmind::Error::Config(_) | extmind::Error::InvalidLayer { .. }) => {
                2
            }
            CliError::Io { .. } | CliError::Engine(extmind::Error::Io(_)) => 3,
            CliError::Engine(extmind::Error::TrainingFailed(_)) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
