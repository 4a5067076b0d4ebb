use crate::dtype::DataType;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Range and derived affine mapping of one quantized blob or parameter set.
///
/// A real value `x` is represented by level `round(x / scale) + zero`.
/// Fields are kept at `f32` because that is how they are persisted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerValues {
    pub f_min: f32,
    pub f_max: f32,
    pub scale: f32,
    /// Zero-point `i0`: the level that represents real 0.
    pub zero: i32,
    /// One-point `i1 = 1/scale + zero`. Stored, not consumed by any operator.
    pub one: f32,
    pub i_min: i32,
    pub i_max: i32,
}

impl QuantizerValues {
    /// The six persisted floats: f_min, f_max, scale, zero, one, reserved.
    pub fn to_record(&self) -> [f32; 6] {
        [self.f_min, self.f_max, self.scale, self.zero as f32, self.one, 0.0]
    }

    pub fn from_record(dtype: DataType, rec: [f32; 6]) -> Result<Self> {
        let (i_min, i_max) = dtype.integer_bounds().ok_or(Error::NotQuantized { dtype })?;
        let zero = rec[3];
        if !(rec[2] > 0.0) || zero.fract() != 0.0 || (zero as i32) < i_min || (zero as i32) > i_max {
            return Err(Error::Format(format!("invalid quantizer record {rec:?}")));
        }
        Ok(QuantizerValues {
            f_min: rec[0],
            f_max: rec[1],
            scale: rec[2],
            zero: zero as i32,
            one: rec[4],
            i_min,
            i_max,
        })
    }

    pub fn dtype(&self) -> DataType {
        if self.i_max > 255 {
            DataType::Int16Q
        } else {
            DataType::Int8Q
        }
    }
}

/// Scale, zero-point and one-point for the range `[f_min, f_max]`.
///
/// `s = (f_max - f_min) / (i_max - i_min)`,
/// `i0 = clamp(round(i_min - f_min / s), i_min, i_max)` with ties to even,
/// `i1 = 1/s + i0`. Evaluated in `f64`.
pub fn estimate_params(f_min: f64, f_max: f64, dtype: DataType) -> Result<QuantizerValues> {
    let (i_min, i_max) = dtype.integer_bounds().ok_or(Error::NotQuantized { dtype })?;
    if !(f_max > f_min) || !f_min.is_finite() || !f_max.is_finite() {
        return Err(Error::DegenerateRange { f_min, f_max });
    }
    let scale = (f_max - f_min) / (i_max - i_min) as f64;
    let zero = (i_min as f64 - f_min / scale)
        .round_ties_even()
        .clamp(i_min as f64, i_max as f64) as i32;
    let one = 1.0 / scale + zero as f64;
    Ok(QuantizerValues {
        f_min: f_min as f32,
        f_max: f_max as f32,
        scale: scale as f32,
        zero,
        one: one as f32,
        i_min,
        i_max,
    })
}

/// `clamp(round(x / s) + i0, i_min, i_max)`. NaN maps to the zero-point.
pub fn quantize_value(x: f32, qv: &QuantizerValues) -> u16 {
    if x.is_nan() {
        return qv.zero as u16;
    }
    let level = (x as f64 / qv.scale as f64).round_ties_even() + qv.zero as f64;
    level.clamp(qv.i_min as f64, qv.i_max as f64) as u16
}

/// `s * (q - i0)`.
pub fn dequantize_level(level: u16, qv: &QuantizerValues) -> f32 {
    (qv.scale as f64 * (level as i64 - qv.zero as i64) as f64) as f32
}

pub fn quantize(t: &Tensor, qv: &QuantizerValues, dtype: DataType) -> Result<Tensor> {
    let bounds = dtype.integer_bounds().ok_or(Error::NotQuantized { dtype })?;
    if bounds != (qv.i_min, qv.i_max) {
        return Err(Error::DtypeMismatch(format!("quantizer values do not describe {dtype}")));
    }
    let levels: Vec<u16> = t.float_values()?.iter().map(|&x| quantize_value(x, qv)).collect();
    Tensor::from_levels(dtype, t.shape(), &levels, *qv)
}

pub fn dequantize(t: &Tensor, qv: &QuantizerValues) -> Result<Tensor> {
    let values: Vec<f32> = t.levels()?.into_iter().map(|l| dequantize_level(l, qv)).collect();
    Tensor::from_f32(t.shape(), &values)
}

/// Bins a float tensor onto the quantized grid but keeps FP32 storage.
pub fn pseudo_quantize(t: &Tensor, qv: &QuantizerValues, dtype: DataType) -> Result<Tensor> {
    dequantize(&quantize(t, qv, dtype)?, qv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn identity_scale() {
        let qv = estimate_params(0.0, 255.0, DataType::Int8Q).unwrap();
        assert_eq!(qv.scale, 1.0);
        assert_eq!(qv.zero, 0);
        assert_eq!(qv.one, 1.0);
    }

    #[test]
    fn celsius_input_domain() {
        let qv = estimate_params(-273.0, 1000.0, DataType::Int8Q).unwrap();
        // oracle: 1273/255 and round(273 / (1273/255)) = round(54.686..)
        let s = 1273.0f64 / 255.0;
        assert!((qv.scale as f64 - s).abs() < 1e-6);
        assert!((qv.scale as f64 - 4.99216).abs() < 1e-5);
        assert_eq!(qv.zero, 55);
    }

    #[test]
    fn fahrenheit_output_domain() {
        let qv = estimate_params(-394.6, 1832.0, DataType::Int8Q).unwrap();
        assert!((qv.scale as f64 - 8.7318).abs() < 1e-4);
        assert_eq!(qv.zero, 45);
    }

    #[test]
    fn degenerate_and_non_quantized_rejected() {
        assert!(matches!(estimate_params(1.0, 1.0, DataType::Int8Q), Err(Error::DegenerateRange { .. })));
        assert!(matches!(estimate_params(2.0, 1.0, DataType::Int8Q), Err(Error::DegenerateRange { .. })));
        assert!(estimate_params(0.0, 1.0, DataType::Fp32).is_err());
    }

    #[test]
    fn zero_point_clamps_when_range_excludes_zero() {
        let qv = estimate_params(2.0, 4.0, DataType::Int8Q).unwrap();
        assert_eq!(qv.zero, 0);
        let qv = estimate_params(-4.0, -2.0, DataType::Int8Q).unwrap();
        assert_eq!(qv.zero, 255);
    }

    #[test]
    fn quantize_examples() {
        let qv = estimate_params(-273.0, 1000.0, DataType::Int8Q).unwrap();
        assert_eq!(quantize_value(0.0, &qv), 55);
        let unit = estimate_params(0.0, 255.0, DataType::Int8Q).unwrap();
        assert_eq!(quantize_value(3.2, &unit), 3);
        assert_eq!(quantize_value(1e6, &qv), 255);
        assert_eq!(quantize_value(f32::INFINITY, &qv), 255);
        assert_eq!(quantize_value(f32::NEG_INFINITY, &qv), 0);
    }

    #[test]
    fn dequantize_examples() {
        let qv = estimate_params(-273.0, 1000.0, DataType::Int8Q).unwrap();
        assert_eq!(dequantize_level(55, &qv), 0.0);
        assert!((dequantize_level(56, &qv) - 4.99216).abs() < 1e-5);
    }

    #[test]
    fn pseudo_quantize_examples() {
        let qv = estimate_params(0.0, 2.55, DataType::Int8Q).unwrap();
        let t = Tensor::from_f32(&[1], &[0.3]).unwrap();
        let p = pseudo_quantize(&t, &qv, DataType::Int8Q).unwrap();
        assert!((p.float_values().unwrap()[0] - 0.3).abs() < 1e-6);

        let qv = estimate_params(-1.3, 2.0, DataType::Int8Q).unwrap();
        let t = Tensor::from_f32(&[1], &[-1.3]).unwrap();
        let p = pseudo_quantize(&t, &qv, DataType::Int8Q).unwrap().float_values().unwrap()[0];
        assert_eq!(p, dequantize_level(0, &qv));
        assert!((p + 1.3).abs() <= qv.scale / 2.0 + 1e-6);
    }

    #[test]
    fn pseudo_quantize_level_count() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let vals: Vec<f32> = (0..1000).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let qv = estimate_params(-5.0, 5.0, DataType::Int8Q).unwrap();
        let t = Tensor::from_f32(&[1000], &vals).unwrap();
        let p = pseudo_quantize(&t, &qv, DataType::Int8Q).unwrap().float_values().unwrap();
        let distinct: HashSet<u32> = p.iter().map(|v| v.to_bits()).collect();
        assert!(distinct.len() <= 255);
    }

    #[test]
    fn record_round_trip() {
        let qv = estimate_params(-3.5, 7.25, DataType::Int16Q).unwrap();
        assert_eq!(QuantizerValues::from_record(DataType::Int16Q, qv.to_record()).unwrap(), qv);
        assert!(QuantizerValues::from_record(DataType::Int8Q, [0.0; 6]).is_err());
    }

    fn dtype_strategy() -> impl Strategy<Value = DataType> {
        prop_oneof![Just(DataType::Int8Q), Just(DataType::Int16Q)]
    }

    proptest! {
        #[test]
        fn estimate_invariants(a in -1e4f64..1e4, w in 1e-3f64..1e4, dt in dtype_strategy()) {
            let qv = estimate_params(a, a + w, dt).unwrap();
            prop_assert!(qv.scale > 0.0);
            prop_assert!(qv.i_min <= qv.zero && qv.zero <= qv.i_max);
            let s = w / (qv.i_max - qv.i_min) as f64;
            prop_assert!(((qv.scale as f64) - s).abs() <= s * 1e-6);
            let one = 1.0 / s + qv.zero as f64;
            prop_assert!(((qv.one as f64) - one).abs() <= one.abs() * 1e-6 + 1e-6);
        }

        #[test]
        fn quantize_saturates(x in prop::num::f32::ANY, dt in dtype_strategy()) {
            let qv = estimate_params(-1.0, 3.0, dt).unwrap();
            let l = quantize_value(x, &qv) as i32;
            prop_assert!(qv.i_min <= l && l <= qv.i_max);
        }

        #[test]
        fn round_trip_error_within_half_step(lo in -100f64..0.0, w in 0.1f64..200.0, t in 0.0f64..=1.0, dt in dtype_strategy()) {
            // range contains zero, so the grid covers [f_min, f_max]
            let hi = lo + w;
            prop_assume!(hi >= 0.0);
            let qv = estimate_params(lo, hi, dt).unwrap();
            let x = (lo + t * w) as f32;
            let back = dequantize_level(quantize_value(x, &qv), &qv);
            prop_assert!(((back - x).abs() as f64) <= qv.scale as f64 / 2.0 * (1.0 + 1e-5) + 1e-6 * w);
        }

        #[test]
        fn pseudo_quantize_idempotent(vals in prop::collection::vec(-50f32..50.0, 1..64), dt in dtype_strategy()) {
            let qv = estimate_params(-50.0, 50.0, dt).unwrap();
            let t = Tensor::from_f32(&[vals.len()], &vals).unwrap();
            let once = pseudo_quantize(&t, &qv, dt).unwrap();
            let twice = pseudo_quantize(&once, &qv, dt).unwrap();
            prop_assert_eq!(once, twice);
        }
    }

    #[test]
    fn dense_grid_round_trip() {
        for dt in [DataType::Int8Q, DataType::Int16Q] {
            let qv = estimate_params(-273.0, 1000.0, dt).unwrap();
            let mut x = -273.0f64;
            while x <= 1000.0 {
                let back = dequantize_level(quantize_value(x as f32, &qv), &qv) as f64;
                assert!((back - x).abs() <= qv.scale as f64 / 2.0 + 1e-3, "{dt} {x}");
                x += 0.0625;
            }
        }
    }
}
