use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate rating for user {user}, item {item}")]
    DuplicatePair { user: usize, item: usize },

    #[error("no ratings")]
    Empty,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("id out of range: {kind} {id} (table has {len} rows)")]
    IdOutOfRange {
        kind: &'static str,
        id: usize,
        len: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cannot sample {requested} pseudo items: only {available} non-interacted items exist")]
    TooManyPseudoItems { requested: usize, available: usize },

    #[error("unbounded budget: noise strength must be positive")]
    UnboundedBudget,

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("decode error: {0}")]
    Decode(String),
}
