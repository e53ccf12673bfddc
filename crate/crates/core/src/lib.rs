//! Text-guided garment editing over a frozen toy generator.
//!
//! The core is generic over the scalar type; `f64` is used for gradient
//! checks and tests, `f32` is available for training runs.

mod error;
pub mod editops;
pub mod embednet;
pub mod imageio;
pub mod eval;
pub mod mapper;
pub mod ndgrad;
pub mod rng;
pub mod scalar;
pub mod stylegen;
pub mod suites;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = ndgrad::Tensor<f64>;
pub type Tensor32 = ndgrad::Tensor<f32>;
pub type Generator64 = stylegen::GeneratorParams<f64>;
pub type Generator32 = stylegen::GeneratorParams<f32>;
