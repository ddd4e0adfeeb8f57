//! Dense tensors and a tape-based reverse-mode differentiation engine.

mod gradcheck;
pub mod io;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{GradCheck, GradCheckReport};
pub use tape::{Elementwise, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{op}: domain error at index {index} (value {value})")]
    Domain { op: &'static str, index: usize, value: f64 },
    #[error("{op}: non-finite result at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: index {index} out of bounds for extent {bound}")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("wrong operand count for {0}")]
    Arity(String),
    #[error("function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
}
