use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("usage error: {0}")]
    Usage(String),

    /// A gradient entry handed to the optimizer was NaN or infinite.
    #[error("training diverged: non-finite gradient at parameter index {index}")]
    TrainingDiverged { index: usize },

    /// A network produced a non-finite output.
    #[error("model diverged: {0}")]
    ModelDiverged(String),

    #[error("loss diverged: {0}")]
    LossDiverged(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("checkpoint version mismatch: file has version {found}, this build reads version {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }

    /// True for the errors that mean a run numerically blew up.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::TrainingDiverged { .. } | Error::ModelDiverged(_) | Error::LossDiverged(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
