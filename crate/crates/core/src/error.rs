use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("road network has no segments")]
    EmptyNetwork,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: timestamp {t} does not increase for taxi {taxi}")]
    Monotonicity {
        path: PathBuf,
        line: usize,
        taxi: String,
        t: i64,
    },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("candidate intervals overlap: [{0}, {1}] and [{2}, {3}]")]
    Overlap(usize, usize, usize, usize),

    #[error("training data contains a single class")]
    SingleClass,

    #[error("point {index} of taxi {taxi} has no label")]
    UnlabeledPoint { taxi: String, index: usize },

    #[error("feature vector has {got} columns, model expects {expected}")]
    SchemaMismatch { expected: usize, got: usize },

    #[error("observation bin {bin} outside 1..={bins}")]
    BinOutOfRange { bin: usize, bins: usize },

    #[error("no training sequences")]
    EmptyTraining,

    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("{taxis} taxis cannot fill {folds} folds")]
    TooFewTaxis { taxis: usize, folds: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether this error came from the filesystem rather than bad input.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
