//! Two-stream (RGB + frequency) multi-scale transformer for image forgery
//! detection and localization, with its full training and evaluation stack:
//! tensor kernels with reverse-mode gradients, the model blocks, losses,
//! a procedural forgery dataset generator, quality metrics, and a training
//! harness with checkpointing.
//!
//! All numeric code is generic over the scalar type ([`Scalar`]): training
//! and evaluation run in `f32`, gradient checking reruns the same code in
//! `f64`. Concrete aliases for the common instantiations live at the crate
//! root.

pub mod autograd;
pub mod blocks;
pub mod config;
pub mod data;
pub mod network;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod tns;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training/evaluation precision.
pub type Tensor32 = tensor::Tensor<f32>;
/// Gradient-checking precision.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = autograd::Tape<f32>;
pub type Tape64 = autograd::Tape<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
