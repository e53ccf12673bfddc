use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    DomainError { op: &'static str, detail: String },
    #[error("invalid axis {axis} for a rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("reduction over an empty set")]
    EmptyReduction,
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tensor is not recorded on any tape")]
    DetachedTensor,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("operands live on different tapes")]
    TapeMismatch,
    #[error("invalid shape {shape:?}: dimensions must be positive and match the data length {len}")]
    InvalidShape { shape: Vec<usize>, len: usize },
}

pub type NdResult<T> = Result<T, NdError>;
