//! Post-training quantization for small sequential CNNs.
//!
//! Scales are chosen per layer by an alternating grid search that maximizes
//! the cosine similarity between FP32 and simulated-quantized convolution
//! outputs. Max-abs and KL-divergence calibration are provided as baselines.
//! The quantized network runs on a bit-exact integer simulator that models a
//! 16-bit intermediate accumulator with overflow-safe group sizes.

pub mod calibration;
pub mod error;
pub mod intsim;
pub mod io;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{forward_fp32, ModelGraph};
pub use quant::{Bits, NetworkScales, QuantParams, RoundingMode};
pub use tensor::Tensor;
