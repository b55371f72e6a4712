//! Dense tensor arithmetic with reverse-mode automatic differentiation and
//! an Adam optimizer.
//!
//! Everything is 64-bit: the models here are tiny and double precision keeps
//! finite-difference gradient checks tight. The engine is define-by-run: a
//! [`Tape`] records every primitive as it runs, and one backward pass over
//! the tape accumulates adjoints for every leaf created with
//! `requires_grad`. One tape per training step.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::gradient_check;
pub use tape::{Gradients, Tape, TapeId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    /// Input shapes do not conform to a primitive's shape rule.
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },
    /// A NaN or infinity was produced or supplied.
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    /// `backward` was called on a tensor that is not a scalar.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    /// A tensor id from a different (or dropped) tape was used.
    #[error("{op}: tensor does not belong to this tape")]
    TapeIntegrity { op: &'static str },
    /// `backward` ran twice on the same tape without a reset.
    #[error("backward already ran on this tape")]
    BackwardTwice,
    /// A softmax row had every entry masked out.
    #[error("row softmax: row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    /// Invalid optimizer configuration or state.
    #[error("adam: {0}")]
    Optimizer(String),
}

impl NumericsError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        NumericsError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
