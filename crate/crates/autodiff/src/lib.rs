//! Small reverse-mode differentiation engine over dense `f64` tensors, with
//! the optimizer, schedules and checkpoint format used for training.

pub mod check;
pub mod checkpoint;
pub mod optim;
pub mod params;
pub mod probe;
pub mod tape;
pub mod tensor;

pub use check::{grad_check, GradCheckReport};
pub use checkpoint::CheckpointError;
pub use optim::{Adam, CosineSchedule, LinearWarmup};
pub use params::ParamStore;
pub use tape::{Gradients, NanPolicy, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    DisconnectedTape,
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
