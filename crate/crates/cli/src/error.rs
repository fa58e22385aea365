use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("missing dataset: {}", .0.display())]
    MissingDataset(PathBuf),

    #[error("refusing to overwrite non-empty directory {} (pass --force)", .0.display())]
    NotEmpty(PathBuf),

    #[error("config: line {line}: {reason}")]
    ConfigLine { line: usize, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("io: {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] panseg::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 for invocation problems (bad config, missing inputs), 1 for
    /// failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingCheckpoint(_) | CliError::MissingDataset(_) | CliError::NotEmpty(_) | CliError::ConfigLine { .. } | CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Core(_) => 1,
        }
    }

    /// The message on one line, prefixed for scripts.
    pub fn render(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error: {msg}")
    }
}
