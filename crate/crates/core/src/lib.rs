//! Two-stream (audio + video) joint CTC/attention recognition with
//! reliability-guided decision fusion.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common cases. Training and the experiment
//! harness run in `f64`.

pub mod autodiff;
pub mod ctc;
pub mod decoding;
pub mod error;
pub mod functional;
pub mod harness;
pub mod fusion;
pub mod nn;
pub mod reliability;
pub mod scalar;
pub mod streams;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
