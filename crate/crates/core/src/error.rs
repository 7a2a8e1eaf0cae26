use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{what} {value} out of range (limit {limit})")]
    Range {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("utterance has {found} distinct speakers, more than the maximum {max}")]
    TooManySpeakers { found: usize, max: usize },

    #[error("words not in vocabulary: {0:?}")]
    OutOfVocabulary(Vec<String>),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid format: {0}")]
    Format(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension { op, left, right }
    }
}
