use std::path::PathBuf;

use thiserror::Error;

use crate::training::LossReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus: no sentences to build a vocabulary from")]
    EmptyCorpus,

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("category ids are not contiguous: id {missing} never appears (max id {max})")]
    CategoryGap { missing: usize, max: usize },

    #[error("conditional generation needs at least 2 categories, found {0}")]
    TooFewCategories(usize),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("category {category} out of range for k = {k}")]
    CategoryOutOfRange { category: usize, k: usize },

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("adversarial training aborted at iteration {iteration}: non-finite losses {report:?}")]
    AdversarialDiverged { iteration: usize, report: LossReport },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
