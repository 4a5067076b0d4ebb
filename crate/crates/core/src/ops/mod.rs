//! Reference operators in float and quantized arithmetic.
//!
//! Float operators accept FP32 and FP16 tensors; FP16 is widened to `f32`,
//! computed, and narrowed on store. Quantized operators take tensors whose
//! quantizer values describe their inputs and are given the output
//! quantizer values explicitly.

mod activation;
mod conv;
mod dense;
mod gemm;
mod norm;
mod pool;

pub use activation::{dropout_inference, relu_float, relu_quant, relu_quant_levels, relu_requant_params};
pub use conv::{conv_forward, im2col, im2col_tensor, ConvParams};
pub use dense::inner_product;
pub use gemm::{gemm_float, gemm_quant, gemm_quant_acc, GemmDims};
pub use norm::{lrn, softmax, LrnParams};
pub use pool::{pool_max, PoolMode, PoolParams};

use crate::dtype::DataType;
use crate::error::{Error, Result};
use crate::quant::{QuantizerValues, RequantParams};
use crate::tensor::Tensor;

/// Applies `f` to the widened values of a float tensor and stores the
/// result back at the input's precision.
pub(crate) fn map_float(t: &Tensor, op: &'static str, f: impl Fn(&[f32]) -> Vec<f32>) -> Result<Tensor> {
    if t.dtype().is_quantized() {
        return Err(Error::RequiresFloat { op, dtype: t.dtype() });
    }
    let out = f(&t.float_values()?);
    Tensor::from_f32_with(t.dtype(), t.shape(), &out)
}

pub(crate) fn input_qvals(t: &Tensor) -> Result<&QuantizerValues> {
    t.qvals().ok_or(Error::MissingQuantizerValues)
}

/// Requantizes accumulators into output levels.
pub(crate) fn store_levels(acc: &[i64], rq: &RequantParams) -> Vec<u16> {
    acc.iter().map(|&a| rq.apply(a) as u16).collect()
}

/// Converts an FP32 bias into the accumulator domain `round(b / (s_a * s_b))`.
pub(crate) fn bias_to_acc(bias: &Tensor, sa: f32, sb: f32) -> Vec<i64> {
    let scale = sa as f64 * sb as f64;
    bias.to_f32_vec().iter().map(|&b| (b as f64 / scale).round_ties_even() as i64).collect()
}

pub(crate) fn same_quantized(a: &Tensor, b: &Tensor, op: &str) -> Result<DataType> {
    if a.dtype() != b.dtype() || !a.dtype().is_quantized() {
        return Err(Error::DtypeMismatch(format!(
            "{op}: quantized path needs equal quantized operands, got {} and {}",
            a.dtype(),
            b.dtype()
        )));
    }
    Ok(a.dtype())
}
