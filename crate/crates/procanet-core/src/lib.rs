//! Dual-encoder attention U-Net for water segmentation, built on hand-rolled
//! dense tensor kernels with layer-paired reverse-mode gradients.
//!
//! The numeric core is generic over [`Scalar`] (f32 in production, f64 for
//! test oracles); the aliases below pin the f32 instantiations used by the
//! CLI and the file formats.

pub mod attention;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ConvKernel32 = kernels::ConvKernel<f32>;
