use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("size error: {0}")]
    Size(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),

    #[error("invalid neighborhood: {0}")]
    InvalidNeighborhood(String),

    #[error("empty neighborhood: query {query} has no point within radius {radius}")]
    EmptyNeighborhood { query: usize, radius: f64 },

    #[error("numeric fault in {layer}: {detail}")]
    NumericFault { layer: String, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("empty evaluation: confusion matrix has no samples")]
    EmptyEvaluation,

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
