use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] resvm::Error),
    #[error("{failed} of {total} verification suites failed")]
    VerifyFailed { failed: usize, total: usize },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 usage or configuration, 2 failed verification, 3 I/O.
    pub fn exit_code(&self) -> u8 {
        use resvm::Error as E;
        match self {
            Self::Config(_) => 1,
            Self::VerifyFailed { .. } => 2,
            Self::Io { .. } => 3,
            Self::Core(e) => match e {
                E::Io { .. } | E::Format { .. } | E::Dataset(_) => 3,
                E::Config(_) | E::CheckpointMismatch(_) | E::Tensor(_) => 1,
            },
        }
    }
}

impl From<resvm::TensorError> for CliError {
    fn from(e: resvm::TensorError) -> Self {
        Self::Core(e.into())
    }
}
