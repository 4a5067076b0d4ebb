use crate::dtype::{derive_wide_types, DataType};
use crate::error::{Error, Result};
use crate::quant::{operator_shift_bits, scale_quant_vals, QuantizerValues, RequantParams};
use crate::tensor::Tensor;

use super::{input_qvals, map_float};

pub fn relu_float(input: &Tensor, negative_slope: f32) -> Result<Tensor> {
    map_float(input, "relu", |xs| {
        xs.iter().map(|&x| if x > 0.0 { x } else { x * negative_slope }).collect()
    })
}

/// Sign-extends the low `bits` of `v`, i.e. a C cast to a signed type.
fn wrap(v: i64, bits: u32) -> i64 {
    if bits >= 64 {
        v
    } else {
        let s = 64 - bits;
        (v << s) >> s
    }
}

/// Integer ReLU with the exact semantics of the generated kernel body:
/// difference in Difftype, 64-bit product truncated by `2^shift_bits`,
/// residual shift, zero-point and clamp in Acctype.
pub fn relu_quant_levels(levels: &[u16], dtype: DataType, rq: &RequantParams) -> Result<Vec<u16>> {
    let wide = derive_wide_types(dtype);
    let (Some(diff_bits), Some(acc_bits)) = (wide.difftype.int_bits(), wide.acctype.int_bits()) else {
        return Err(Error::NotQuantized { dtype });
    };
    if !(0..=62).contains(&rq.shift_bits) {
        return Err(Error::InvalidShiftBits(rq.shift_bits as i32));
    }
    let in_zero = wrap(rq.in_zero, diff_bits);
    let mult = wrap(rq.mult, acc_bits);
    let (out_zero, out_min, out_max) =
        (wrap(rq.out_zero, acc_bits), wrap(rq.out_min, acc_bits), wrap(rq.out_max, acc_bits));
    let store_mask = (1i64 << (8 * dtype.byte_width())) - 1;
    Ok(levels
        .iter()
        .map(|&x| {
            let relu = wrap(wrap(x as i64, diff_bits) - in_zero, diff_bits).max(0);
            let mut reg = wrap(relu.wrapping_mul(mult) / (1i64 << rq.shift_bits), acc_bits);
            if rq.shift >= 0 {
                reg >>= rq.shift.min(63);
            } else {
                reg = wrap(reg.wrapping_shl((-(rq.shift as i32)) as u32), acc_bits);
            }
            let v = wrap(reg + out_zero, acc_bits).max(out_min).min(out_max);
            (v & store_mask) as u16
        })
        .collect())
}

/// Launch parameters for quantized ReLU between two quantizers.
pub fn relu_requant_params(
    input: &QuantizerValues,
    output: &QuantizerValues,
    dtype: DataType,
) -> Result<RequantParams> {
    Ok(scale_quant_vals(input, output, operator_shift_bits(dtype))?.kernel_launch())
}

pub fn relu_quant(input: &Tensor, out_qv: &QuantizerValues) -> Result<Tensor> {
    let dtype = input.dtype();
    let in_qv = input_qvals(input)?;
    let rq = relu_requant_params(in_qv, out_qv, dtype)?;
    let out = relu_quant_levels(&input.levels()?, dtype, &rq)?;
    Tensor::from_levels(dtype, input.shape(), &out, *out_qv)
}

/// Inference-time dropout is the identity.
pub fn dropout_inference(input: &Tensor) -> Tensor {
    input.clone()
}
