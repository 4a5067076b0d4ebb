use serde::{Deserialize, Serialize};

use crate::dtype::DataType;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn require_fp32(t: &Tensor, op: &'static str) -> Result<Vec<f32>> {
    if t.dtype() != DataType::Fp32 {
        return Err(Error::RequiresFloat { op, dtype: t.dtype() });
    }
    t.float_values()
}

/// Per-sample softmax with max subtraction.
pub fn softmax(input: &Tensor) -> Result<Tensor> {
    let x = require_fp32(input, "softmax")?;
    let mut out = Vec::with_capacity(x.len());
    for s in x.chunks(input.sample_len().max(1)) {
        let m = s.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f32> = s.iter().map(|&v| (v - m).exp()).collect();
        let sum: f32 = e.iter().sum();
        out.extend(e.iter().map(|v| v / sum));
    }
    Tensor::from_f32(input.shape(), &out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrnParams {
    #[serde(default = "LrnParams::default_size")]
    pub local_size: usize,
    #[serde(default = "LrnParams::default_alpha")]
    pub alpha: f32,
    #[serde(default = "LrnParams::default_beta")]
    pub beta: f32,
    #[serde(default = "LrnParams::default_k")]
    pub k: f32,
}

impl LrnParams {
    fn default_size() -> usize {
        5
    }
    fn default_alpha() -> f32 {
        1e-4
    }
    fn default_beta() -> f32 {
        0.75
    }
    fn default_k() -> f32 {
        1.0
    }
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams { local_size: 5, alpha: 1e-4, beta: 0.75, k: 1.0 }
    }
}

/// Across-channel local response normalization,
/// `x / (k + alpha/n * sum x^2)^beta` over a window of `n` channels
/// centred on each channel.
pub fn lrn(input: &Tensor, lp: &LrnParams) -> Result<Tensor> {
    if lp.local_size == 0 || lp.local_size % 2 == 0 {
        return Err(Error::InvalidParam(format!("lrn local_size {} must be odd", lp.local_size)));
    }
    let x = require_fp32(input, "lrn")?;
    let (n, c, plane) = match *input.shape() {
        [n, c, h, w] => (n, c, h * w),
        [n, c] => (n, c, 1),
        ref s => return Err(Error::ShapeMismatch(format!("lrn expects N,C[,H,W], got {s:?}"))),
    };
    let half = lp.local_size / 2;
    let scale = lp.alpha / lp.local_size as f32;
    let mut out = vec![0.0f32; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let lo = ch.saturating_sub(half);
            let hi = (ch + half).min(c - 1);
            for p in 0..plane {
                let sq: f32 = (lo..=hi).map(|j| x[(s * c + j) * plane + p].powi(2)).sum();
                let i = (s * c + ch) * plane + p;
                out[i] = x[i] / (lp.k + scale * sq).powf(lp.beta);
            }
        }
    }
    Tensor::from_f32(input.shape(), &out)
}
