use std::path::{Path, PathBuf};

/// Failure classes, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing upstream artifact {path}: run `{stage}` first")]
    MissingUpstream { stage: String, path: PathBuf },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] ringlab_core::Error),
    #[error(transparent)]
    Metrics(#[from] ringlab_metrics::MetricsError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::MissingUpstream { .. } => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
