//! Generic event boundary detection in two stages: a local model scores
//! every sampled frame from a short clip around it, and a query-based
//! decoder turns windows of those scores into boundary timestamps.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used for training and inference.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod container;
pub mod datamodel;
pub mod ddmnet;
pub mod decoder;
pub mod error;
pub mod evaluator;
pub mod featbank;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

/// Training and inference precision.
pub type Real = f32;
pub type RealMatrix = Matrix<Real>;
pub type Params = params::ParamStore<Real>;
pub type LocalCheckpoint = pipeline::LocalCheckpoint<Real>;
pub type DecoderCheckpoint = pipeline::DecoderCheckpoint<Real>;
