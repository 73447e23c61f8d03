use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] fedcsr::Error),

    #[error("missing artifacts in {}: {}", dir.display(), list(files))]
    MissingArtifacts { dir: PathBuf, files: Vec<PathBuf> },

    #[error("invariant check failed: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn list(files: &[PathBuf]) -> String {
    files
        .iter()
        .map(|f| f.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl CliError {
    /// Process exit status: 1 for failed invariant suites, 2 for invalid
    /// configuration or usage, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invariant(_) => 1,
            CliError::Config(_) | CliError::Core(fedcsr::Error::Config(_)) => 2,
            _ => 3,
        }
    }
}
