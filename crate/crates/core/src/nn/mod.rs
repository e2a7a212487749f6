//! Dense `f32` tensors, reverse-mode differentiation and the AdamW optimizer.

mod graph;
mod optim;
mod tensor;

pub use graph::{softmax_rows, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::{ParamId, ParamStore, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable belongs to a different graph")]
    ForeignVar,
    #[error("backward already ran on this graph")]
    AlreadyBackpropagated,
    #[error("no target positions selected for the loss")]
    NoTargets,
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("index {index} out of range for {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0}")]
    InvalidArgument(String),
}
