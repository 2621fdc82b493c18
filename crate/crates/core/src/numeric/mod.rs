//! Dense tensors, reverse-mode differentiation, recurrent and attention
//! cells, optimizers, and the checkpoint format.

pub mod cells;
pub mod finite_diff;
pub mod checkpoint;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use cells::{attention, causal_mask, GruCell, LstmCell, LstmState, SelfAttention};
pub use optim::{Optimizer, OptimizerConfig};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("every position of a softmax row is masked")]
    AllMasked,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("unknown parameter #{0}")]
    UnknownParam(usize),
}
