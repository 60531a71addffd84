use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shapes, symmetry, label range).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite values or failed convergence. `stage` names where it was detected.
    #[error("numeric error in {stage}: {detail}")]
    Numeric { stage: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed dataset: {0}")]
    MalformedDataset(String),

    #[error("parse error in {}:{line}: {msg}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn numeric(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            stage: stage.into(),
            detail: detail.into(),
        }
    }

    /// True for errors that originate in reading or validating input data.
    pub fn is_dataset_error(&self) -> bool {
        matches!(
            self,
            Error::MalformedDataset(_) | Error::Parse { .. } | Error::Io(_)
        )
    }
}
