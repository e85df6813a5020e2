use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },

    #[error("file not found: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("malformed artifact {}: {message}", .path.display())]
    Artifact { path: PathBuf, message: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Core(#[from] pis_core::Error),
}

impl CliError {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Field {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Field { .. } => 2,
            _ => 1,
        }
    }
}
