//! Element data types and the widened intermediate types derived from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Storage type of a tensor or of a layer's input/compute/output side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DataType {
    #[serde(rename = "FP32")]
    Fp32,
    #[serde(rename = "FP16")]
    Fp16,
    #[serde(rename = "INT8Q")]
    Int8Q,
    #[serde(rename = "INT16Q")]
    Int16Q,
}

impl DataType {
    pub const ALL: [DataType; 4] = [DataType::Fp32, DataType::Fp16, DataType::Int16Q, DataType::Int8Q];

    pub fn byte_width(self) -> usize {
        match self {
            DataType::Fp32 => 4,
            DataType::Fp16 | DataType::Int16Q => 2,
            DataType::Int8Q => 1,
        }
    }

    pub fn is_quantized(self) -> bool {
        matches!(self, DataType::Int8Q | DataType::Int16Q)
    }

    pub fn is_float(self) -> bool {
        !self.is_quantized()
    }

    /// Inclusive `[i_min, i_max]` of the unsigned storage levels.
    pub fn integer_bounds(self) -> Option<(i32, i32)> {
        match self {
            DataType::Int8Q => Some((0, 255)),
            DataType::Int16Q => Some((0, 65535)),
            _ => None,
        }
    }

    /// Number of quantization steps across the full integer range.
    pub fn level_count(self) -> Option<u32> {
        self.integer_bounds().map(|(lo, hi)| (hi - lo) as u32)
    }

    /// One-byte tag used by the on-disk formats.
    pub fn tag(self) -> u8 {
        match self {
            DataType::Fp32 => 0,
            DataType::Fp16 => 1,
            DataType::Int8Q => 2,
            DataType::Int16Q => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => DataType::Fp32,
            1 => DataType::Fp16,
            2 => DataType::Int8Q,
            3 => DataType::Int16Q,
            _ => return None,
        })
    }

    /// Short lowercase name as used on the command line.
    pub fn short_name(self) -> &'static str {
        match self {
            DataType::Fp32 => "fp32",
            DataType::Fp16 => "fp16",
            DataType::Int8Q => "int8",
            DataType::Int16Q => "int16",
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataType::Fp32 => "FP32",
            DataType::Fp16 => "FP16",
            DataType::Int8Q => "INT8Q",
            DataType::Int16Q => "INT16Q",
        })
    }
}

impl FromStr for DataType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" | "float" => Ok(DataType::Fp32),
            "fp16" | "half" => Ok(DataType::Fp16),
            "int8" | "int8q" => Ok(DataType::Int8Q),
            "int16" | "int16q" => Ok(DataType::Int16Q),
            _ => Err(Error::InvalidParam(format!("unknown precision '{s}'"))),
        }
    }
}

/// Types available for differences and accumulators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WideType {
    Fp32,
    Fp16,
    S16,
    S32,
    S64,
}

impl WideType {
    /// Bit width of a signed integer wide type.
    pub fn int_bits(self) -> Option<u32> {
        match self {
            WideType::S16 => Some(16),
            WideType::S32 => Some(32),
            WideType::S64 => Some(64),
            _ => None,
        }
    }

    /// Inclusive range of a signed integer wide type.
    pub fn int_range(self) -> Option<(i64, i64)> {
        self.int_bits().map(|b| {
            if b == 64 {
                (i64::MIN, i64::MAX)
            } else {
                (-(1i64 << (b - 1)), (1i64 << (b - 1)) - 1)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WideTypeMap {
    pub source: DataType,
    pub difftype: WideType,
    pub acctype: WideType,
}

/// Difference type is twice the quantized width, accumulator four times;
/// float types map onto themselves.
pub fn derive_wide_types(dtype: DataType) -> WideTypeMap {
    let (difftype, acctype) = match dtype {
        DataType::Fp32 => (WideType::Fp32, WideType::Fp32),
        DataType::Fp16 => (WideType::Fp16, WideType::Fp16),
        DataType::Int8Q => (WideType::S16, WideType::S32),
        DataType::Int16Q => (WideType::S32, WideType::S64),
    };
    WideTypeMap { source: dtype, difftype, acctype }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_are_4_2_2_1() {
        assert_eq!(DataType::Fp32.byte_width(), 4);
        assert_eq!(DataType::Fp16.byte_width(), 2);
        assert_eq!(DataType::Int16Q.byte_width(), 2);
        assert_eq!(DataType::Int8Q.byte_width(), 1);
    }

    #[test]
    fn quantized_bounds_and_levels() {
        assert_eq!(DataType::Int8Q.integer_bounds(), Some((0, 255)));
        assert_eq!(DataType::Int16Q.integer_bounds(), Some((0, 65535)));
        assert_eq!(DataType::Fp32.integer_bounds(), None);
        assert_eq!(DataType::Int8Q.level_count(), Some(255));
        assert_eq!(DataType::Int16Q.level_count(), Some(65535));
        for dt in DataType::ALL {
            assert_eq!(dt.is_quantized(), matches!(dt, DataType::Int8Q | DataType::Int16Q));
        }
    }

    #[test]
    fn wide_types() {
        let m = derive_wide_types(DataType::Int8Q);
        assert_eq!((m.difftype, m.acctype), (WideType::S16, WideType::S32));
        let m = derive_wide_types(DataType::Int16Q);
        assert_eq!((m.difftype, m.acctype), (WideType::S32, WideType::S64));
        let m = derive_wide_types(DataType::Fp32);
        assert_eq!((m.difftype, m.acctype), (WideType::Fp32, WideType::Fp32));
        let m = derive_wide_types(DataType::Fp16);
        assert_eq!((m.difftype, m.acctype), (WideType::Fp16, WideType::Fp16));
    }

    #[test]
    fn tags_round_trip() {
        for dt in DataType::ALL {
            assert_eq!(DataType::from_tag(dt.tag()), Some(dt));
            assert_eq!(dt.short_name().parse::<DataType>().unwrap(), dt);
        }
        assert_eq!(DataType::from_tag(9), None);
    }
}
