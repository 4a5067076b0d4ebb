//! Quantizer mathematics: range observation, scale/zero-point estimation,
//! (de)quantization and fixed-point requantization.

mod observe;
mod requant;
mod values;

pub use observe::{ObservationState, QuantKey, QuantMode, Quantizer};
pub use requant::{
    default_shift_bits, operator_shift_bits, round_shift_half_even, scale_quant_vals,
    scale_quant_vals_product, RequantParams,
};
pub use values::{
    dequantize, dequantize_level, estimate_params, pseudo_quantize, quantize, quantize_value,
    QuantizerValues,
};
