use crate::dtype::{derive_wide_types, DataType};
use crate::error::{Error, Result};
use crate::quant::{QuantizerValues, RequantParams};

use super::store_levels;

/// `A: m x k`, `B: k x n`, `C: m x n`, all row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GemmDims {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl GemmDims {
    pub fn new(m: usize, n: usize, k: usize) -> Self {
        GemmDims { m, n, k }
    }

    fn check(&self, a: usize, b: usize, c: usize) -> Result<()> {
        if a != self.m * self.k || b != self.k * self.n || c != self.m * self.n {
            return Err(Error::ShapeMismatch(format!(
                "gemm {self:?} with operand lengths {a}, {b}, {c}"
            )));
        }
        Ok(())
    }
}

/// `C <- alpha * A * B + beta * C`. With `beta == 0` the prior contents of
/// `C` are ignored. Each cell sums over `k` in ascending order.
pub fn gemm_float(a: &[f32], b: &[f32], c: &mut [f32], dims: GemmDims, alpha: f32, beta: f32) -> Result<()> {
    dims.check(a.len(), b.len(), c.len())?;
    let GemmDims { m, n, k } = dims;
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0f32;
            for (p, &av) in row.iter().enumerate() {
                acc += av * b[p * n + j];
            }
            let cell = &mut c[i * n + j];
            *cell = if beta == 0.0 { alpha * acc } else { alpha * acc + beta * *cell };
        }
    }
    Ok(())
}

/// Largest `k` for which `k * i_max^2` fits the Acctype of `dtype`.
fn max_depth(dtype: DataType) -> Result<u64> {
    let (_, i_max) = dtype.integer_bounds().ok_or(Error::NotQuantized { dtype })?;
    let (_, acc_max) = derive_wide_types(dtype).acctype.int_range().expect("integer acctype");
    Ok(acc_max as u64 / (i_max as u64 * i_max as u64))
}

/// Zero-point corrected accumulators `sum (a - za)(b - zb)`, computed in the
/// rearranged form: raw products first, then the row/column sums scaled by
/// the zero-points, then the constant `k * za * zb`.
pub fn gemm_quant_acc(a: &[u16], b: &[u16], dims: GemmDims, za: i64, zb: i64, dtype: DataType) -> Result<Vec<i64>> {
    dims.check(a.len(), b.len(), dims.m * dims.n)?;
    let limit = max_depth(dtype)?;
    let GemmDims { m, n, k } = dims;
    if k as u64 > limit {
        return Err(Error::AccumulatorOverflow { k, max: limit, dtype });
    }
    let row_sums: Vec<i64> = (0..m).map(|i| a[i * k..(i + 1) * k].iter().map(|&v| v as i64).sum()).collect();
    let col_sums: Vec<i64> = (0..n).map(|j| (0..k).map(|p| b[p * n + j] as i64).sum()).collect();
    let constant = k as i64 * za * zb;
    let mut out = vec![0i64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut ab = 0i64;
            for p in 0..k {
                ab += a[i * k + p] as i64 * b[p * n + j] as i64;
            }
            out[i * n + j] = ab - za * col_sums[j] - zb * row_sums[i] + constant;
        }
    }
    Ok(out)
}

/// Quantized GEMM. `rq` rescales by `s_a * s_b / s_c` and carries the
/// output zero-point and bounds of `qc`.
pub fn gemm_quant(
    a: &[u16],
    b: &[u16],
    dims: GemmDims,
    qa: &QuantizerValues,
    qb: &QuantizerValues,
    qc: &QuantizerValues,
    rq: &RequantParams,
) -> Result<Vec<u16>> {
    let dtype = qc.dtype();
    if rq.out_zero != qc.zero as i64 || (rq.out_min, rq.out_max) != (qc.i_min as i64, qc.i_max as i64) {
        return Err(Error::InvalidParam("requantization parameters do not match the output quantizer".into()));
    }
    let acc = gemm_quant_acc(a, b, dims, qa.zero as i64, qb.zero as i64, dtype)?;
    Ok(store_levels(&acc, rq))
}
