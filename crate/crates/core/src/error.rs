use thiserror::Error;

use crate::memtrace::Category;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("no graph recorded for this tensor")]
    NoGraph,

    #[error("tensor belongs to a different tape")]
    ForeignTape,

    #[error("backward seed must be scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),

    #[error("gradients already populated; reset the tape before running backward again")]
    GradsNotReset,

    #[error("positive index {index} for anchor {anchor} is out of range for {targets} targets")]
    InvalidPositive { anchor: usize, index: usize, targets: usize },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{0} cache consumed before it was filled")]
    CacheNotFilled(&'static str),

    #[error("memory accounting violation in {category:?}: releasing {requested} floats with {live} live")]
    MemViolation { category: Category, live: usize, requested: usize },

    #[error("worker exchange failed: {0}")]
    Exchange(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
