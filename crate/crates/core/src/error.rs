use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("non-finite value: {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error(
        "empty positive content: ratio {ratio} x bag size {bag_size} rounds to zero positives"
    )]
    EmptyPositiveContent { ratio: f64, bag_size: usize },

    #[error("marginal below one instance: mu {mu} x N {n} < 1")]
    MarginalBelowOne { mu: f64, n: usize },

    #[error("empty bag in assignment: bag {0} has no rows")]
    EmptyBagInAssignment(usize),

    #[error("AUC undefined: need both classes (positives {n_pos}, negatives {n_neg})")]
    AucUndefined { n_pos: usize, n_neg: usize },

    #[error("not IDX: {0}")]
    NotIdx(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
