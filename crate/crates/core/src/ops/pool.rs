use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PoolMode {
    #[default]
    #[serde(rename = "MAX")]
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub mode: PoolMode,
}

impl PoolParams {
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 || h < self.kernel || w < self.kernel {
            return Err(Error::ShapeMismatch(format!(
                "pool kernel {} stride {} over {h}x{w}",
                self.kernel, self.stride
            )));
        }
        Ok(((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }
}

fn pool_plane<T: Copy + PartialOrd>(x: &[T], w: usize, pp: &PoolParams, oh: usize, ow: usize, out: &mut Vec<T>) {
    for oy in 0..oh {
        for ox in 0..ow {
            let mut best = x[oy * pp.stride * w + ox * pp.stride];
            for ky in 0..pp.kernel {
                for kx in 0..pp.kernel {
                    let v = x[(oy * pp.stride + ky) * w + ox * pp.stride + kx];
                    if v > best {
                        best = v;
                    }
                }
            }
            out.push(best);
        }
    }
}

/// Windowed maximum over each `H x W` plane of an `N,C,H,W` tensor. Works
/// on stored levels for quantized tensors and keeps their quantizer values.
pub fn pool_max(input: &Tensor, pp: &PoolParams) -> Result<Tensor> {
    let [n, c, h, w] = *input.shape() else {
        return Err(Error::ShapeMismatch(format!("pool expects N,C,H,W input, got {:?}", input.shape())));
    };
    let (oh, ow) = pp.output_extent(h, w)?;
    let shape = [n, c, oh, ow];
    if let Some(qv) = input.qvals().filter(|_| input.dtype().is_quantized()) {
        let x = input.levels()?;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in x.chunks(h * w) {
            pool_plane(plane, w, pp, oh, ow, &mut out);
        }
        Tensor::from_levels(input.dtype(), &shape, &out, *qv)
    } else {
        let x = input.float_values()?;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in x.chunks(h * w) {
            pool_plane(plane, w, pp, oh, ow, &mut out);
        }
        Tensor::from_f32_with(input.dtype(), &shape, &out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtype::DataType;
    use crate::quant::{dequantize, estimate_params, quantize};
    use proptest::prelude::*;

    const P2: PoolParams = PoolParams { kernel: 2, stride: 2, mode: PoolMode::Max };

    #[test]
    fn examples() {
        let t = Tensor::from_f32(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(pool_max(&t, &P2).unwrap().float_values().unwrap(), vec![4.0]);

        let c = Tensor::from_f32(&[1, 2, 4, 4], &[7.0; 32]).unwrap();
        let y = pool_max(&c, &PoolParams { kernel: 3, stride: 1, mode: PoolMode::Max }).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.float_values().unwrap().iter().all(|&v| v == 7.0));

        // 5x5 with kernel 3, stride 2 -> 2x2
        let t = Tensor::from_f32(&[1, 1, 5, 5], &(0..25).map(|v| v as f32).collect::<Vec<_>>()).unwrap();
        let y = pool_max(&t, &PoolParams { kernel: 3, stride: 2, mode: PoolMode::Max }).unwrap();
        assert_eq!(y.float_values().unwrap(), vec![12., 14., 22., 24.]);

        assert!(pool_max(&Tensor::zeros(&[1, 1, 1, 1]).unwrap(), &P2).is_err());
    }

    proptest! {
        #[test]
        fn quantized_pool_commutes_with_dequantize(vals in proptest::collection::vec(-5.0f32..5.0, 36)) {
            let qv = estimate_params(-5.0, 5.0, DataType::Int8Q).unwrap();
            let q = quantize(&Tensor::from_f32(&[1, 1, 6, 6], &vals).unwrap(), &qv, DataType::Int8Q).unwrap();
            let pp = PoolParams { kernel: 3, stride: 1, mode: PoolMode::Max };
            let a = dequantize(&pool_max(&q, &pp).unwrap(), &qv).unwrap();
            let b = pool_max(&dequantize(&q, &qv).unwrap(), &pp).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
