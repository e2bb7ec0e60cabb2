//! Error type shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file, pointing at the offending line.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown event code `{0}`")]
    UnknownCode(String),

    /// A pairwise score whose denominator vanishes (zero or constant matrix).
    #[error("similarity undefined: {0}")]
    UndefinedSimilarity(String),

    #[error("bad file format: {0}")]
    Format(String),

    /// Non-finite parameters encountered during training.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
