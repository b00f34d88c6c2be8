use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("buffer of length {len} does not fit shape {shape:?}")]
    BufferLength { shape: Vec<usize>, len: usize },
    #[error("invalid attribute for {op}: {msg}")]
    InvalidAttr { op: &'static str, msg: String },
    #[error("non-finite input to {op}: {msg}")]
    NonFiniteInput { op: &'static str, msg: String },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("gradient output must be a scalar, got shape {0:?}")]
    OutputNotScalar(Vec<usize>),
    #[error("tensor is not on the tape")]
    NotOnTape,
    #[error("operands live on different tapes")]
    TapeMismatch,
    #[error("replay diverged at tape entry {0}")]
    ReplayMismatch(usize),
}

pub type Result<T> = std::result::Result<T, Error>;
