//! Small owned CNN: forward pass, backpropagation, SGD and evaluation.
//!
//! The network is split into a feature group (the convolution stack) and a
//! classifier group (the dense head) so the federation layer can exchange
//! either the whole model or the head alone.

mod arch;
mod model;
mod params;
mod tensor;

pub use arch::{Architecture, ConvSpec, DenseSpec, ParamGroup};
pub use model::{evaluate, forward, loss_and_grad, sgd_apply, Batch, Metrics, NUM_CLASSES};
pub(crate) use model::loss_and_grad_head;
pub use params::ParamSet;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
}
