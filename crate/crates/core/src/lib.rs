//! Semi-supervised fine-tuning of a non-autoregressive acoustic model with a
//! frozen reference model supplying pseudo-label mel-spectrograms.

pub mod error;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub mod dsp;
pub mod data;
pub mod exper;
pub mod model;
pub mod train;

mod binio;

/// Scalar used by the training, data and experiment layers.
pub type Real = f64;
pub type Tensor64 = tensor::Tensor<f64>;
