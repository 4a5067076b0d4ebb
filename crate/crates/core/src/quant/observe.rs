use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dtype::DataType;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{estimate_params, QuantizerValues};

/// Running min/max of every value a quantizer has seen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationState {
    pub seen_min: f64,
    pub seen_max: f64,
    pub count: u64,
}

impl Default for ObservationState {
    fn default() -> Self {
        ObservationState { seen_min: f64::INFINITY, seen_max: f64::NEG_INFINITY, count: 0 }
    }
}

impl ObservationState {
    pub fn from_range(f_min: f64, f_max: f64) -> Self {
        ObservationState { seen_min: f_min, seen_max: f_max, count: 1 }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Widens the range over all elements of `t`. NaNs are counted but do
    /// not move the range.
    pub fn observe(&self, t: &Tensor) -> Result<ObservationState> {
        if t.is_empty() {
            return Err(Error::EmptyObservation);
        }
        let mut next = *self;
        for v in t.to_f32_vec() {
            if !v.is_nan() {
                next.seen_min = next.seen_min.min(v as f64);
                next.seen_max = next.seen_max.max(v as f64);
            }
        }
        next.count += t.len() as u64;
        Ok(next)
    }

    pub fn merge(&self, other: &ObservationState) -> ObservationState {
        ObservationState {
            seen_min: self.seen_min.min(other.seen_min),
            seen_max: self.seen_max.max(other.seen_max),
            count: self.count + other.count,
        }
    }

    /// Quantizer values for `dtype` over the observed range.
    ///
    /// The range is widened to contain 0 so that zero and every observed
    /// value sit on the grid. A still-empty interval (all zeros) is widened
    /// symmetrically by `max(|f|, 1) * 2^-8`.
    pub fn finalize(&self, dtype: DataType) -> Result<QuantizerValues> {
        if self.is_empty() || !self.seen_min.is_finite() || !self.seen_max.is_finite() {
            return Err(Error::EmptyObservation);
        }
        let mut lo = self.seen_min.min(0.0);
        let mut hi = self.seen_max.max(0.0);
        if lo == hi {
            let pad = lo.abs().max(1.0) * 2f64.powi(-8);
            lo -= pad;
            hi += pad;
        }
        estimate_params(lo, hi, dtype)
    }
}

/// Quantizer behaviour shared by every quantizer of a net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantMode {
    #[serde(rename = "PASSIVE")]
    Passive,
    #[serde(rename = "OBSERVE")]
    Observe,
    #[serde(rename = "PSEUDO")]
    Pseudo,
    #[serde(rename = "QUANTIZED")]
    Quantized,
}

/// What a quantizer is attached to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QuantKey {
    Bottom(String),
    Top(String),
    /// Parameter set by its stored name.
    Param(String),
}

impl QuantKey {
    pub fn name(&self) -> &str {
        match self {
            QuantKey::Bottom(n) | QuantKey::Top(n) | QuantKey::Param(n) => n,
        }
    }
}

impl fmt::Display for QuantKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantKey::Bottom(n) => write!(f, "bottom '{n}'"),
            QuantKey::Top(n) => write!(f, "top '{n}'"),
            QuantKey::Param(n) => write!(f, "param '{n}'"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    pub key: QuantKey,
    pub mode: QuantMode,
    pub state: ObservationState,
}

impl Quantizer {
    pub fn new(key: QuantKey) -> Self {
        Quantizer { key, mode: QuantMode::Passive, state: ObservationState::default() }
    }

    /// Records `t` when in OBSERVE mode; a no-op otherwise.
    pub fn record(&mut self, t: &Tensor) -> Result<()> {
        if self.mode == QuantMode::Observe {
            self.state = self.state.observe(t)?;
        }
        Ok(())
    }
}
