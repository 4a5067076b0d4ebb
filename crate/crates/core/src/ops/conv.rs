use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{operator_shift_bits, scale_quant_vals_product, QuantizerValues};
use crate::tensor::Tensor;

use super::gemm::{gemm_float, gemm_quant_acc, GemmDims};
use super::{bias_to_acc, input_qvals, same_quantized};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub kernel_h: usize,
    pub kernel_w: usize,
    #[serde(default = "one")]
    pub stride_h: usize,
    #[serde(default = "one")]
    pub stride_w: usize,
    #[serde(default)]
    pub pad_h: usize,
    #[serde(default)]
    pub pad_w: usize,
    #[serde(default = "one")]
    pub groups: usize,
    pub out_channels: usize,
}

fn one() -> usize {
    1
}

impl ConvParams {
    pub fn square(kernel: usize, stride: usize, pad: usize, out_channels: usize) -> Self {
        ConvParams {
            kernel_h: kernel,
            kernel_w: kernel,
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
            groups: 1,
            out_channels,
        }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::InvalidParam("kernel and stride must be positive".into()));
        }
        let ph = h + 2 * self.pad_h;
        let pw = w + 2 * self.pad_w;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::ShapeMismatch(format!(
                "padded input {ph}x{pw} smaller than kernel {}x{}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok(((ph - self.kernel_h) / self.stride_h + 1, (pw - self.kernel_w) / self.stride_w + 1))
    }

    pub fn check_groups(&self, in_channels: usize) -> Result<()> {
        if self.groups == 0
            || self.out_channels == 0
            || in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::InvalidParam(format!(
                "groups {} must divide in_channels {in_channels} and out_channels {}",
                self.groups, self.out_channels
            )));
        }
        Ok(())
    }
}

/// Unrolls one `channels x h x w` sample into a `(channels*kh*kw) x (oh*ow)`
/// column matrix. Padding positions hold `pad_value`.
pub fn im2col<T: Copy>(input: &[T], channels: usize, h: usize, w: usize, cp: &ConvParams, pad_value: T) -> Result<Vec<T>> {
    if input.len() != channels * h * w {
        return Err(Error::ShapeMismatch(format!("im2col input of {} for {channels}x{h}x{w}", input.len())));
    }
    let (oh, ow) = cp.output_extent(h, w)?;
    let cols = oh * ow;
    let mut out = Vec::with_capacity(channels * cp.kernel_h * cp.kernel_w * cols);
    for c in 0..channels {
        for ki in 0..cp.kernel_h {
            for kj in 0..cp.kernel_w {
                for oy in 0..oh {
                    let y = (oy * cp.stride_h + ki) as isize - cp.pad_h as isize;
                    for ox in 0..ow {
                        let x = (ox * cp.stride_w + kj) as isize - cp.pad_w as isize;
                        let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                        out.push(if inside { input[(c * h + y as usize) * w + x as usize] } else { pad_value });
                    }
                }
            }
        }
    }
    Ok(out)
}

fn nchw(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::ShapeMismatch(format!("expected N,C,H,W input, got {s:?}"))),
    }
}

/// Column tensor `[N, C*kh*kw, oh*ow]`. Quantized inputs are padded with
/// their zero-point, float inputs with 0.
pub fn im2col_tensor(input: &Tensor, cp: &ConvParams) -> Result<Tensor> {
    let (n, c, h, w) = nchw(input)?;
    let (oh, ow) = cp.output_extent(h, w)?;
    let shape = [n, c * cp.kernel_h * cp.kernel_w, oh * ow];
    if input.dtype().is_quantized() {
        let qv = input_qvals(input)?;
        let levels = input.levels()?;
        let mut cols = Vec::new();
        for s in levels.chunks(c * h * w) {
            cols.extend(im2col(s, c, h, w, cp, qv.zero as u16)?);
        }
        Tensor::from_levels(input.dtype(), &shape, &cols, *qv)
    } else {
        let vals = input.float_values()?;
        let mut cols = Vec::new();
        for s in vals.chunks(c * h * w) {
            cols.extend(im2col(s, c, h, w, cp, 0.0)?);
        }
        Tensor::from_f32_with(input.dtype(), &shape, &cols)
    }
}

/// Convolution as im2col plus one GEMM per group per sample.
///
/// `weights` is `(out_c, in_c/groups, kh, kw)`. The quantized path takes
/// the output quantizer values in `out_qv`, adds the bias in the
/// accumulator domain and requantizes with ties to even.
pub fn conv_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    cp: &ConvParams,
    out_qv: Option<&QuantizerValues>,
) -> Result<Tensor> {
    let (n, c, h, w) = nchw(input)?;
    cp.check_groups(c)?;
    let g = cp.groups;
    let (cg, og) = (c / g, cp.out_channels / g);
    let kk = cg * cp.kernel_h * cp.kernel_w;
    if weights.shape() != [cp.out_channels, cg, cp.kernel_h, cp.kernel_w] {
        return Err(Error::ShapeMismatch(format!(
            "weights {:?}, expected {:?}",
            weights.shape(),
            [cp.out_channels, cg, cp.kernel_h, cp.kernel_w]
        )));
    }
    if let Some(b) = bias {
        if b.len() != cp.out_channels {
            return Err(Error::ShapeMismatch(format!("bias of {} for {} outputs", b.len(), cp.out_channels)));
        }
    }
    let (oh, ow) = cp.output_extent(h, w)?;
    let hw = oh * ow;
    let out_shape = [n, cp.out_channels, oh, ow];
    let dims = GemmDims::new(og, hw, kk);

    if !input.dtype().is_quantized() {
        if weights.dtype().is_quantized() {
            return Err(Error::DtypeMismatch("float convolution with quantized weights".into()));
        }
        let x = input.float_values()?;
        let wv = weights.float_values()?;
        let bv = bias.map(|b| b.to_f32_vec());
        let mut out = vec![0.0f32; n * cp.out_channels * hw];
        for s in 0..n {
            let cols = im2col(&x[s * c * h * w..(s + 1) * c * h * w], c, h, w, cp, 0.0)?;
            for gi in 0..g {
                let a = &wv[gi * og * kk..(gi + 1) * og * kk];
                let b = &cols[gi * kk * hw..(gi + 1) * kk * hw];
                let dst = &mut out[(s * cp.out_channels + gi * og) * hw..(s * cp.out_channels + (gi + 1) * og) * hw];
                gemm_float(a, b, dst, dims, 1.0, 0.0)?;
                if let Some(bv) = &bv {
                    for (r, row) in dst.chunks_mut(hw).enumerate() {
                        row.iter_mut().for_each(|v| *v += bv[gi * og + r]);
                    }
                }
            }
        }
        return Tensor::from_f32_with(input.dtype(), &out_shape, &out);
    }

    let dtype = same_quantized(input, weights, "conv")?;
    let out_qv = out_qv.ok_or(Error::MissingQuantizerValues)?;
    let (qx, qw) = (input_qvals(input)?, input_qvals(weights)?);
    let rq = scale_quant_vals_product(qw, qx, out_qv, operator_shift_bits(dtype))?;
    let bias_acc = bias.map(|b| bias_to_acc(b, qw.scale, qx.scale));
    let x = input.levels()?;
    let wl = weights.levels()?;
    let mut out = Vec::with_capacity(n * cp.out_channels * hw);
    for s in 0..n {
        let cols = im2col(&x[s * c * h * w..(s + 1) * c * h * w], c, h, w, cp, qx.zero as u16)?;
        for gi in 0..g {
            let a = &wl[gi * og * kk..(gi + 1) * og * kk];
            let b = &cols[gi * kk * hw..(gi + 1) * kk * hw];
            let acc = gemm_quant_acc(a, b, dims, qw.zero as i64, qx.zero as i64, dtype)?;
            for (i, &v) in acc.iter().enumerate() {
                let row = gi * og + i / hw;
                let v = v + bias_acc.as_ref().map_or(0, |b| b[row]);
                out.push(rq.apply(v) as u16);
            }
        }
    }
    Tensor::from_levels(dtype, &out_shape, &out, *out_qv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtype::DataType;
    use crate::quant::{estimate_params, quantize};
    use rand::{Rng, SeedableRng};

    /// Direct nested-loop convolution, summing in the same order as the
    /// column layout: channel, kernel row, kernel column.
    fn direct_conv(x: &[f32], (n, c, h, w): (usize, usize, usize, usize), wt: &[f32], bias: Option<&[f32]>, cp: &ConvParams) -> Vec<f32> {
        let (oh, ow) = cp.output_extent(h, w).unwrap();
        let cg = c / cp.groups;
        let og = cp.out_channels / cp.groups;
        let mut out = Vec::new();
        for s in 0..n {
            for o in 0..cp.out_channels {
                let gi = o / og;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f32;
                        for ci in 0..cg {
                            for ki in 0..cp.kernel_h {
                                for kj in 0..cp.kernel_w {
                                    let y = (oy * cp.stride_h + ki) as isize - cp.pad_h as isize;
                                    let xx = (ox * cp.stride_w + kj) as isize - cp.pad_w as isize;
                                    let v = if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                        x[((s * c + gi * cg + ci) * h + y as usize) * w + xx as usize]
                                    } else {
                                        0.0
                                    };
                                    acc += wt[((o * cg + ci) * cp.kernel_h + ki) * cp.kernel_w + kj] * v;
                                }
                            }
                        }
                        out.push(acc + bias.map_or(0.0, |b| b[o]));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn one_by_one_kernel_columns_equal_input() {
        let x: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let cols = im2col(&x, 3, 2, 2, &ConvParams::square(1, 1, 0, 1), 0.0).unwrap();
        assert_eq!(cols, x);
    }

    #[test]
    fn three_by_three_with_two_by_two_kernel() {
        let x: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let cols = im2col(&x, 1, 3, 3, &ConvParams::square(2, 1, 0, 1), 0.0).unwrap();
        // rows are kernel taps (0,0) (0,1) (1,0) (1,1); columns the 4 windows
        assert_eq!(
            cols,
            vec![1., 2., 4., 5., 2., 3., 5., 6., 4., 5., 7., 8., 5., 6., 8., 9.]
        );
    }

    #[test]
    fn quantized_padding_uses_zero_point() {
        let qv = estimate_params(-1.0, 3.0, DataType::Int8Q).unwrap();
        let t = Tensor::from_levels(DataType::Int8Q, &[1, 1, 1, 1], &[200], qv).unwrap();
        let cols = im2col_tensor(&t, &ConvParams::square(3, 1, 1, 1)).unwrap();
        let levels = cols.levels().unwrap();
        assert_eq!(levels.len(), 9);
        assert_eq!(levels.iter().filter(|&&l| l as i32 == qv.zero).count(), 8);
        assert_eq!(levels[4], 200);
    }

    #[test]
    fn non_positive_extent_is_an_error() {
        assert!(im2col(&[0.0; 4], 1, 2, 2, &ConvParams::square(3, 1, 0, 1), 0.0).is_err());
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::from_f32(&[1, 1, 2, 2], &[1., -2., 3., 4.]).unwrap();
        let w = Tensor::from_f32(&[1, 1, 1, 1], &[1.0]).unwrap();
        let b = Tensor::from_f32(&[1], &[0.0]).unwrap();
        let y = conv_forward(&x, &w, Some(&b), &ConvParams::square(1, 1, 0, 1), None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn im2col_matches_direct_loops_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let g = rng.gen_range(1..=2);
            let c = g * rng.gen_range(1..=3);
            let oc = g * rng.gen_range(1..=3);
            let (h, w) = (rng.gen_range(3..=7), rng.gen_range(3..=7));
            let k = rng.gen_range(1..=3);
            let mut cp = ConvParams::square(k, rng.gen_range(1..=2), rng.gen_range(0..=1), oc);
            cp.groups = g;
            let n = rng.gen_range(1..=2);
            let x: Vec<f32> = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wt: Vec<f32> = (0..oc * (c / g) * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bias: Vec<f32> = (0..oc).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xt = Tensor::from_f32(&[n, c, h, w], &x).unwrap();
            let wtt = Tensor::from_f32(&[oc, c / g, k, k], &wt).unwrap();
            let bt = Tensor::from_f32(&[oc], &bias).unwrap();
            let got = conv_forward(&xt, &wtt, Some(&bt), &cp, None).unwrap().float_values().unwrap();
            assert_eq!(got, direct_conv(&x, (n, c, h, w), &wt, Some(&bias), &cp));
        }
    }

    #[test]
    fn grouped_equals_split_convolutions() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (c, oc, h, w) = (4, 6, 5, 5);
        let x: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wt: Vec<f32> = (0..oc * 2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut cp = ConvParams::square(3, 1, 1, oc);
        cp.groups = 2;
        let full = conv_forward(
            &Tensor::from_f32(&[1, c, h, w], &x).unwrap(),
            &Tensor::from_f32(&[oc, 2, 3, 3], &wt).unwrap(),
            None,
            &cp,
            None,
        )
        .unwrap()
        .float_values()
        .unwrap();
        let half_cp = ConvParams::square(3, 1, 1, oc / 2);
        let mut joined = Vec::new();
        for gi in 0..2 {
            let xs = &x[gi * 2 * h * w..(gi + 1) * 2 * h * w];
            let ws = &wt[gi * 3 * 18..(gi + 1) * 3 * 18];
            let part = conv_forward(
                &Tensor::from_f32(&[1, 2, h, w], xs).unwrap(),
                &Tensor::from_f32(&[3, 2, 3, 3], ws).unwrap(),
                None,
                &half_cp,
                None,
            )
            .unwrap();
            joined.extend(part.float_values().unwrap());
        }
        assert_eq!(full, joined);
    }

    #[test]
    fn group_divisibility() {
        let x = Tensor::zeros(&[1, 3, 4, 4]).unwrap();
        let w = Tensor::zeros(&[2, 1, 1, 1]).unwrap();
        let mut cp = ConvParams::square(1, 1, 0, 2);
        cp.groups = 2;
        assert!(matches!(conv_forward(&x, &w, None, &cp, None), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn quantized_conv_within_one_step() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f32> = (0..3 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wt: Vec<f32> = (0..4 * 3 * 9).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let cp = ConvParams::square(3, 1, 1, 4);
        let qx = estimate_params(-1.0, 1.0, DataType::Int8Q).unwrap();
        let qw = estimate_params(-0.5, 0.5, DataType::Int8Q).unwrap();
        let xq = quantize(&Tensor::from_f32(&[1, 3, 8, 8], &x).unwrap(), &qx, DataType::Int8Q).unwrap();
        let wq = quantize(&Tensor::from_f32(&[4, 3, 3, 3], &wt).unwrap(), &qw, DataType::Int8Q).unwrap();
        let reference = conv_forward(
            &Tensor::from_f32(&[1, 3, 8, 8], &xq.to_f32_vec()).unwrap(),
            &Tensor::from_f32(&[4, 3, 3, 3], &wq.to_f32_vec()).unwrap(),
            None,
            &cp,
            None,
        )
        .unwrap()
        .float_values()
        .unwrap();
        let lo = reference.iter().cloned().fold(0.0f32, f32::min);
        let hi = reference.iter().cloned().fold(0.0f32, f32::max);
        let qo = estimate_params(lo as f64, hi as f64, DataType::Int8Q).unwrap();
        let y = conv_forward(&xq, &wq, None, &cp, Some(&qo)).unwrap();
        for (got, want) in y.to_f32_vec().iter().zip(&reference) {
            assert!((got - want).abs() <= qo.scale * 1.0001, "{got} {want}");
        }
    }
}
