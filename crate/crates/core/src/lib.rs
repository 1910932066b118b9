//! Time-parameterized convolutions for irregularly sampled multivariate
//! time series: a from-scratch f64 layer library with hand-derived backward
//! passes, an encoder-decoder interpolation model, a sequence classifier,
//! synthetic data generators and a small training stack.

pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod timefuncs;
pub mod tpc;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
