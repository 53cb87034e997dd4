use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value in input")]
    Numeric { op: &'static str },

    #[error("{what}: index {index} out of range (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("cross entropy: every position is ignored, loss is undefined")]
    EmptyLoss,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("sequence of length {len} exceeds the limit of {max}")]
    Length { len: usize, max: usize },

    #[error("classifier input contains no tokens besides padding")]
    EmptyInput,

    #[error("style statistics are degenerate: {0}")]
    DegenerateStats(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("checkpoint is truncated or corrupt: {0}")]
    Corrupt(String),

    #[error("tensor {name}: expected shape {expected:?}, checkpoint holds {found:?}")]
    HeadShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("expected a {expected} model, got a {found} model")]
    HeadType {
        expected: &'static str,
        found: &'static str,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("split: {0}")]
    Split(String),

    #[error("{0}")]
    Param(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
