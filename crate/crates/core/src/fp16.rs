//! IEEE 754 binary16 storage conversion.
//!
//! FP16 is a storage format only. Arithmetic widens to `f32`, computes, and
//! narrows on store.

use half::f16;

/// Round-to-nearest-even narrowing. Overflow goes to infinity, subnormals
/// are kept, NaN becomes a quiet NaN.
pub fn fp16_encode(x: f32) -> u16 {
    f16::from_f32(x).to_bits()
}

/// Exact widening.
pub fn fp16_decode(bits: u16) -> f32 {
    f16::from_bits(bits).to_f32()
}

/// Narrow and widen again; the value an FP16 blob would hold.
pub fn fp16_round(x: f32) -> f32 {
    fp16_decode(fp16_encode(x))
}
