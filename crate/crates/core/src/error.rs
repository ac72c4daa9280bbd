use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("sequence length {len} is not divisible by segment length {segment}")]
    NotDivisible { len: usize, segment: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("backward already ran on this graph; record a new forward pass first")]
    BackwardReplayed,
    #[error("loss must hold exactly one element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("need at least {needed} tokens, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
}
