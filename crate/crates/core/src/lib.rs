//! Low-bit post-training quantization for Swin-style super-resolution networks.

pub mod autodiff;
pub mod calib;
pub mod complexity;
pub mod distill;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
