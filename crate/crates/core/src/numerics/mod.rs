//! Minimal f32 tensor engine with reverse-mode autodiff, the layer set used
//! by the models in this crate, and SGD/Adam optimizers.
//!
//! Single-threaded forward/backward on one tape is bit-deterministic;
//! independent tapes over a shared frozen parameter set may run in parallel.

pub mod layers;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use layers::{LayerSpec, Sequential};
pub use optim::{optimizer_step, OptimizerKind, OptimizerState};
pub use rng::RngStream;
pub use tape::{Reduction, Tape, ValueId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("data length {got} does not match shape product {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("{context}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
        context: String,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("loss is detached from every gradient-tracked input")]
    DetachedLoss,
    #[error("label {label} at position {index} out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("grid {h}x{w} too small; need at least 3x3 for central differences")]
    GridTooSmall { h: usize, w: usize },
    #[error("params/grads misaligned: {params} vs {grads}")]
    ParamGradMismatch { params: usize, grads: usize },
    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },
}

impl NumericsError {
    /// Attach a layer index to a shape error raised inside a container.
    pub(crate) fn at_layer(self, index: usize) -> Self {
        match self {
            NumericsError::ShapeMismatch {
                expected,
                got,
                context,
            } => NumericsError::ShapeMismatch {
                expected,
                got,
                context: format!("layer {index} ({context})"),
            },
            other => other,
        }
    }
}
