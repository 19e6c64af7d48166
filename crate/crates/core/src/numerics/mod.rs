//! Dense-array numerics with reverse-mode automatic differentiation.
//!
//! Everything downstream builds its forward pass from these ops, so every
//! gradient in the model is reachable by [`gradcheck::grad_check`].

pub mod gradcheck;
pub mod scalar;
pub mod tape;
pub mod tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid axis {axis} for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: unsupported operand of shape {shape:?} (expected rank {expected})")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("rank {rank} exceeds supported maximum of 3")]
    RankTooHigh { rank: usize },
    #[error("non-finite value produced in {context}")]
    NonFinite { context: String },
}
