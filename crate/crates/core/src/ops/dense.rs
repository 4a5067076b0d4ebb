use crate::error::{Error, Result};
use crate::quant::{operator_shift_bits, scale_quant_vals_product, QuantizerValues};
use crate::tensor::Tensor;

use super::gemm::{gemm_float, gemm_quant_acc, GemmDims};
use super::{bias_to_acc, input_qvals, same_quantized};

/// Fully connected layer. Each sample of `input` is flattened to `K`
/// features; `weights` is `K x out`. Output shape is `[N, out]`.
pub fn inner_product(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    out_qv: Option<&QuantizerValues>,
) -> Result<Tensor> {
    let n = input.batch();
    let k = input.sample_len();
    let [wk, out] = *weights.shape() else {
        return Err(Error::ShapeMismatch(format!("inner product weights must be 2-D, got {:?}", weights.shape())));
    };
    if wk != k {
        return Err(Error::ShapeMismatch(format!("inner product input has {k} features, weights expect {wk}")));
    }
    if let Some(b) = bias {
        if b.len() != out {
            return Err(Error::ShapeMismatch(format!("bias of {} for {out} outputs", b.len())));
        }
    }
    let dims = GemmDims::new(n, out, k);

    if !input.dtype().is_quantized() {
        if weights.dtype().is_quantized() {
            return Err(Error::DtypeMismatch("float inner product with quantized weights".into()));
        }
        let mut y = vec![0.0f32; n * out];
        gemm_float(&input.float_values()?, &weights.float_values()?, &mut y, dims, 1.0, 0.0)?;
        if let Some(b) = bias {
            let bv = b.to_f32_vec();
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(&bv).for_each(|(v, b)| *v += b);
            }
        }
        return Tensor::from_f32_with(input.dtype(), &[n, out], &y);
    }

    let dtype = same_quantized(input, weights, "inner product")?;
    let out_qv = out_qv.ok_or(Error::MissingQuantizerValues)?;
    let (qx, qw) = (input_qvals(input)?, input_qvals(weights)?);
    let rq = scale_quant_vals_product(qx, qw, out_qv, operator_shift_bits(dtype))?;
    let acc = gemm_quant_acc(&input.levels()?, &weights.levels()?, dims, qx.zero as i64, qw.zero as i64, dtype)?;
    let bias_acc = bias.map(|b| bias_to_acc(b, qx.scale, qw.scale));
    let levels: Vec<u16> = acc
        .iter()
        .enumerate()
        .map(|(i, &v)| rq.apply(v + bias_acc.as_ref().map_or(0, |b| b[i % out])) as u16)
        .collect();
    Tensor::from_levels(dtype, &[n, out], &levels, *out_qv)
}
