//! Weakly-supervised audio-visual video parsing at desk scale.
//!
//! The pipeline: per-segment audio/visual features pass through
//! temporal-spatial attention, adaptive cross-modal interaction, and
//! pseudo-label semantic fusion into per-modality classifier heads. Training
//! uses a five-term objective whose audio-visual similarity term is weighted
//! by a piecewise function of segment-pair cosine similarity. A synthetic
//! generator stands in for real feature extractors, and evaluation follows
//! the standard segment-level / event-level F-score protocol.
//!
//! The numerics core is generic over the scalar type; the model pipeline
//! runs on the f64 aliases below.

pub mod numerics;

pub mod dataset;
pub mod losses;
pub mod metrics;
pub mod trainer;

pub mod cli;
pub mod model;

/// Working float type of the model pipeline.
pub type Scalar = f64;
/// Dense array of [`Scalar`].
pub type Tensor = numerics::tensor::Tensor<Scalar>;
/// Autodiff tape over [`Scalar`].
pub type Tape = numerics::tape::Tape<Scalar>;
pub use numerics::tape::Var;
pub use numerics::NumericsError;
