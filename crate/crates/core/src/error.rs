use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "weighted design is rank deficient (condition ratio {ratio:.3e}); \
         retry with a small l2 penalty"
    )]
    RankDeficient { ratio: f64 },

    #[error("positivity violation: {0}")]
    PositivityViolation(String),

    #[error("degenerate instrument: Z is constant and no known propensity was supplied")]
    DegenerateInstrument,

    #[error("network training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("load error in {path}: {message}")]
    Load { path: String, message: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("study aborted: {failed} of {total} replicates failed")]
    StudyAborted { failed: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
