//! Dense tensors, reverse-mode differentiation and first-order optimizers.

mod optim;
mod tape;
mod tensor;

pub use optim::{clip_global_norm, Direction, Optimizer, OptimizerKind};
pub use tape::{matmul_into, BagRows, Gradients, Tape, Var};
pub use tensor::{softmax, softmax_cross_entropy, Tensor};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("contract violated: {0}")]
    Contract(String),
}
