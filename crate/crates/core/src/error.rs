use std::io;

use thiserror::Error;

/// Errors produced anywhere in the core crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("shape error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("state error: {0}")]
    State(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
