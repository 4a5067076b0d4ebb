use std::path::PathBuf;

use crate::dtype::DataType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty observation")]
    EmptyObservation,

    #[error("degenerate range [{f_min}, {f_max}]")]
    DegenerateRange { f_min: f64, f_max: f64 },

    #[error("invalid rescale ratio {0}")]
    InvalidRescaleRatio(f64),

    #[error("shift_bits {0} out of range")]
    InvalidShiftBits(i32),

    #[error("{dtype} is not a quantized type")]
    NotQuantized { dtype: DataType },

    #[error("{op} requires float input, got {dtype}")]
    RequiresFloat { op: &'static str, dtype: DataType },

    #[error("quantized tensor is missing quantizer values")]
    MissingQuantizerValues,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dtype mismatch: {0}")]
    DtypeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("accumulator overflow: K={k} exceeds {max} for {dtype}")]
    AccumulatorOverflow { k: usize, max: u64, dtype: DataType },

    #[error("degenerate gating: all gate values are zero")]
    DegenerateGating,

    #[error("inconsistent usage counts: sum {sum} != K*B = {expected}")]
    InconsistentUsageCounts { sum: u64, expected: u64 },

    #[error("invalid graph:\n{0}")]
    InvalidGraph(String),

    #[error("model not calibrated: {0}")]
    NotCalibrated(String),

    #[error("missing input '{0}'")]
    MissingInput(String),

    #[error("missing parameter '{0}'")]
    MissingParam(String),

    #[error("quantized layer '{0}' requires QUANTIZED mode")]
    ModeRequired(String),

    #[error("duplicate kernel name '{0}' in compilation scope")]
    DuplicateKernel(String),

    #[error("invalid kernel argument: {0}")]
    InvalidKernelArg(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("model format: {0}")]
    Format(String),

    #[error("kernel cache: {0}")]
    Cache(String),

    #[error("interpreter: {0}")]
    Interp(String),

    #[error("no calibration data")]
    NoCalibrationData,

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File { path: path.into(), source }
    }
}
