use crate::dtype::DataType;
use crate::error::{Error, Result};

use super::QuantizerValues;

/// Integer multiplier and shifts that rescale an accumulator into an output
/// quantized domain: `x * r ~ (x * mult) >> (shift_bits + shift)`, with a
/// negative total meaning a left shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequantParams {
    pub shift_bits: i8,
    pub mult: i64,
    pub shift: i8,
    pub in_zero: i64,
    pub out_zero: i64,
    pub out_min: i64,
    pub out_max: i64,
}

/// Listing-style default: `(64-bit capable ? 32 : 16) / sizeof(MItype) - 1`.
pub fn default_shift_bits(dtype: DataType, wide_multiply: bool) -> i8 {
    let base = if wide_multiply { 32 } else { 16 };
    (base / dtype.byte_width() as i32 - 1) as i8
}

/// Shift width used by the reference operators.
///
/// INT8 keeps the 31-bit default since `mult` must fit a 32-bit Acctype.
/// INT16 accumulates in 64 bits and uses 47 bits, the widest for which a
/// 16-bit difference times `mult` still fits a 64-bit product; 15 bits
/// of mantissa would cost up to two output steps at full scale.
pub fn operator_shift_bits(dtype: DataType) -> i8 {
    match dtype {
        DataType::Int16Q => 47,
        _ => 31,
    }
}

const MAX_SHIFT_BITS: i8 = 62;

/// Splits `r` into a mantissa `m` in `[2^(shift_bits-1), 2^shift_bits)` and
/// a residual shift `h` so that `r ~ m / 2^(shift_bits + h)`.
fn multiplier_for_ratio(r: f64, shift_bits: i8) -> Result<(i64, i8)> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidRescaleRatio(r));
    }
    if !(1..=MAX_SHIFT_BITS).contains(&shift_bits) {
        return Err(Error::InvalidShiftBits(shift_bits as i32));
    }
    // r = f * 2^e with f in [0.5, 1)
    let mut e = r.log2().floor() as i32 + 1;
    let mut f = r / 2f64.powi(e);
    // log2 may be off by one ulp near powers of two
    while f >= 1.0 {
        f /= 2.0;
        e += 1;
    }
    while f < 0.5 {
        f *= 2.0;
        e -= 1;
    }
    let top = 1i64 << shift_bits;
    let mut m = (f * top as f64).round() as i64;
    if m == top {
        m /= 2;
        e += 1;
    }
    let h = -e;
    if !(i8::MIN as i32..=i8::MAX as i32).contains(&h) {
        return Err(Error::InvalidRescaleRatio(r));
    }
    Ok((m, h as i8))
}

fn with_zeros(mult: i64, shift: i8, shift_bits: i8, input: &QuantizerValues, output: &QuantizerValues) -> RequantParams {
    RequantParams {
        shift_bits,
        mult,
        shift,
        in_zero: input.zero as i64,
        out_zero: output.zero as i64,
        out_min: output.i_min as i64,
        out_max: output.i_max as i64,
    }
}

/// Requantization from one quantized domain into another, `r = s_in / s_out`.
pub fn scale_quant_vals(
    input: &QuantizerValues,
    output: &QuantizerValues,
    shift_bits: i8,
) -> Result<RequantParams> {
    let r = input.scale as f64 / output.scale as f64;
    let (mult, shift) = multiplier_for_ratio(r, shift_bits)?;
    Ok(with_zeros(mult, shift, shift_bits, input, output))
}

/// Requantization of a product of two quantized operands, `r = s_a * s_b / s_c`.
pub fn scale_quant_vals_product(
    a: &QuantizerValues,
    b: &QuantizerValues,
    output: &QuantizerValues,
    shift_bits: i8,
) -> Result<RequantParams> {
    let r = a.scale as f64 * b.scale as f64 / output.scale as f64;
    let (mult, shift) = multiplier_for_ratio(r, shift_bits)?;
    Ok(with_zeros(mult, shift, shift_bits, a, output))
}

/// `round(v / 2^k)` with ties to even; `k < 0` shifts left, saturating.
pub fn round_shift_half_even(v: i128, k: i32) -> i128 {
    if k <= 0 {
        let k = (-k) as u32;
        return if k >= 127 {
            if v == 0 { 0 } else if v > 0 { i128::MAX } else { i128::MIN }
        } else {
            v.checked_mul(1i128 << k).unwrap_or(if v > 0 { i128::MAX } else { i128::MIN })
        };
    }
    if k >= 127 {
        return 0;
    }
    let q = v >> k;
    let rem = v - (q << k);
    let half = 1i128 << (k - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

impl RequantParams {
    /// The ratio this parameter set actually applies.
    pub fn effective_ratio(&self) -> f64 {
        self.mult as f64 * 2f64.powi(-(self.shift_bits as i32 + self.shift as i32))
    }

    /// `round(x * mult / 2^(shift_bits + shift))`, ties to even, computed
    /// exactly in 128-bit arithmetic.
    pub fn requantize(&self, x: i64) -> i64 {
        let v = round_shift_half_even(x as i128 * self.mult as i128, self.shift_bits as i32 + self.shift as i32);
        v.clamp(i64::MIN as i128, i64::MAX as i128) as i64
    }

    /// Requantize, add the output zero-point and clamp to the output bounds.
    pub fn apply(&self, acc: i64) -> i64 {
        self.requantize(acc).saturating_add(self.out_zero).clamp(self.out_min, self.out_max)
    }

    /// Parameters for kernels that divide by `2^shift_bits` with truncation
    /// before applying `shift`. A negative residual shift would amplify the
    /// truncation, so it is folded into `shift_bits`; the applied ratio is
    /// unchanged.
    pub fn kernel_launch(&self) -> RequantParams {
        let mut p = *self;
        if p.shift < 0 {
            let total = p.shift_bits as i32 + p.shift as i32;
            if total >= 0 {
                p.shift_bits = total as i8;
                p.shift = 0;
            } else {
                p.shift_bits = 0;
                p.shift = total as i8;
            }
        }
        p
    }
}
