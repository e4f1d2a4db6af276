use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised across the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index error in {op}: row {row} has index {index} outside [0, {bound})")]
    Index {
        op: &'static str,
        row: usize,
        index: usize,
        bound: usize,
    },
    #[error("non-finite value entering {op}")]
    NumericDomain { op: &'static str },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("sequence of length {len} exceeds the maximum length {max}")]
    Length { len: usize, max: usize },
    #[error("{0} is frozen")]
    Frozen(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
