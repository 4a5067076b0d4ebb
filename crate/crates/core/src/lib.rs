//! Mixed-precision quantized inference engine.

pub mod cli;
pub mod codegen;
pub mod dtype;
pub mod error;
pub mod fp16;
pub mod graph;
pub mod moe;
pub mod ops;
pub mod quant;
pub mod tensor;

pub use dtype::{derive_wide_types, DataType, WideType, WideTypeMap};
pub use error::{Error, Result};
pub use tensor::Tensor;
