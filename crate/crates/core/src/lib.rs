//! Two-stage finetuning of frozen-feature speech encoders with triplet,
//! Barlow Twins and combined objectives, plus the evaluation tooling around it.
//!
//! The numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases below
//! fix it to `f64`, which is what the command-line tool uses.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Tensor2D = Matrix<f64>;
/// `B × D` embeddings, one row per sample.
pub type EmbeddingBatch = Matrix<f64>;
pub type Encoder = model::EncoderParams<f64>;
pub type Adapter = model::AdapterParams<f64>;
pub type Checkpoint = model::Checkpoint<f64>;
pub type FeatureSequence = data::FeatureSequence<f64>;
