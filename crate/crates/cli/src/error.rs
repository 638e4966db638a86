use std::path::{Path, PathBuf};

use fisherlda_core::Error as CoreError;

/// Failure of a CLI command, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown image id: {0}")]
    Lookup(String),

    #[error("evaluation protocol error: {0}")]
    Protocol(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Core(CoreError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    /// 2 config/IO, 3 lookup, 4 protocol, 5 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Format { .. } | CliError::Config(_) => 2,
            CliError::Lookup(_) => 3,
            CliError::Protocol(_) => 4,
            CliError::Divergence(_) => 5,
            CliError::Core(e) => match e {
                CoreError::Protocol(_) => 4,
                CoreError::Divergence(_)
                | CoreError::LineSearch
                | CoreError::Regularization(_)
                | CoreError::Consistency(_) => 5,
                _ => 2,
            },
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Protocol(m) => CliError::Protocol(m),
            CoreError::Divergence(m) => CliError::Divergence(m),
            other => CliError::Core(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
