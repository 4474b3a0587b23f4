//! Multi-label classification with label-level representations and dual
//! contrastive learning, built on a small reverse-mode autodiff engine.
//!
//! The numeric code is generic over [`scalar::Scalar`]; the aliases below
//! fix it to the two supported precisions.

pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod export;
pub mod gradcheck;
pub mod graph;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod param;
pub mod rng;
pub mod sarl;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use scalar::{Precision, Scalar};
pub use tensor::{Tensor, TensorError};

/// Training precision.
pub type TrainScalar = f32;
/// Verification precision.
pub type HighScalar = f64;

pub type TrainTensor = Tensor<TrainScalar>;
pub type HighTensor = Tensor<HighScalar>;
pub type TrainGraph = graph::Graph<TrainScalar>;
pub type HighGraph = graph::Graph<HighScalar>;
