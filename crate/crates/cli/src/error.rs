use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config rejected: {0}")]
    Schema(String),

    #[error("missing {what} at {path}; run `{hint}` first")]
    MissingArtifact { what: String, path: PathBuf, hint: String },

    #[error("artifact {path} was built under a different configuration: {detail}")]
    Mismatch { path: PathBuf, detail: String },

    #[error("corrupt artifact {path}: {source}")]
    Corrupt {
        path: PathBuf,
        #[source]
        source: lorakey::Error,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] lorakey::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Schema(_) => 2,
            CliError::MissingArtifact { .. } | CliError::Mismatch { .. } => 3,
            CliError::Corrupt { .. } => 4,
            CliError::Invariant(_) => 5,
            CliError::Io { .. } | CliError::Core(_) => 1,
        }
    }
}
