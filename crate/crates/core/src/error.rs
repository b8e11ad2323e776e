use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SeldError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SeldError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("undefined direction: vector norm {0:e} is too small")]
    UndefinedDirection(f64),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SeldError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SeldError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        SeldError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
