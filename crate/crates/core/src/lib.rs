//! Per-channel activation quantization for transformer blocks, made
//! GEMM-friendly by folding activation scales into weights and by
//! re-centering activation channels into biases.
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod harness;
pub mod qgemm;
pub mod quant;
pub mod report;
pub mod tensor;
pub mod transform;

pub use error::{Error, Result};
