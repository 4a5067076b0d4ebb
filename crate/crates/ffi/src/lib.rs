//! C ABI over the `qmix` engine.
//!
//! Every fallible function returns a [`QmixStatus`]; on failure the message
//! is available from [`qmix_last_error`] on the same thread until the next
//! call. Networks are opaque [`QmixNet`] handles released with
//! [`qmix_net_free`]; strings returned by the library are released with
//! [`qmix_string_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use qmix::codegen::{emit_program, Dialect};
use qmix::graph::{apply_precision, plan_memory, single_input, validate, GraphSpec, Model, Net};
use qmix::quant::QuantMode;
use qmix::{DataType, Error, Tensor};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QmixStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    InvalidGraph = 4,
    NotCalibrated = 5,
    NoCalibrationData = 6,
    ShapeMismatch = 7,
    DtypeMismatch = 8,
    Io = 9,
    Format = 10,
    Unsupported = 11,
    BufferTooSmall = 12,
    Internal = 13,
}

/// A loaded network ready for inference.
pub struct QmixNet {
    net: Net,
    input: String,
    output: String,
    sample_in: usize,
    sample_out: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(QmixStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidGraph(_) | Error::MissingInput(_) | Error::MissingParam(_) | Error::ModeRequired(_) => {
                QmixStatus::InvalidGraph
            }
            Error::NotCalibrated(_) | Error::EmptyObservation => QmixStatus::NotCalibrated,
            Error::NoCalibrationData => QmixStatus::NoCalibrationData,
            Error::ShapeMismatch(_) => QmixStatus::ShapeMismatch,
            Error::DtypeMismatch(_) | Error::NotQuantized { .. } | Error::RequiresFloat { .. } => {
                QmixStatus::DtypeMismatch
            }
            Error::File { .. } | Error::Io(_) => QmixStatus::Io,
            Error::Format(_) | Error::Json(_) => QmixStatus::Format,
            Error::Unsupported(_) => QmixStatus::Unsupported,
            _ => QmixStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: QmixStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> QmixStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            QmixStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            QmixStatus::Internal
        }
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p).to_str().map(Some).map_err(|_| Failure(QmixStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// As [`opt_str`].
unsafe fn req_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    opt_str(p, what)?.ok_or_else(|| Failure(QmixStatus::NullPointer, format!("{what} is null")))
}

fn parse_dtype(s: &str) -> Result<DataType, Failure> {
    s.parse().map_err(|e: Error| Failure(QmixStatus::InvalidArgument, e.to_string()))
}

fn load_model(path: Option<&str>) -> Result<Option<Model>, Failure> {
    Ok(path.map(Model::load).transpose()?)
}

fn build(spec: &GraphSpec, model: Option<&Model>, seed: u64) -> Result<QmixNet, Failure> {
    let net = Net::new(spec, model, seed)?;
    let (inputs, outputs) = (net.input_names(), net.output_names());
    let ([input], [output]) = (inputs.as_slice(), outputs.as_slice()) else {
        return fail(QmixStatus::Unsupported, "the C interface needs exactly one input and one output blob");
    };
    let shape = |b: &str| net.graph().shapes[b][1..].iter().product();
    Ok(QmixNet { sample_in: shape(input), sample_out: shape(output), input: input.clone(), output: output.clone(), net })
}

fn batch_tensor(h: &QmixNet, data: *const f32, batch: usize) -> Result<Tensor, Failure> {
    if data.is_null() {
        return fail(QmixStatus::NullPointer, "input is null");
    }
    if batch == 0 {
        return fail(QmixStatus::InvalidArgument, "batch must be positive");
    }
    let mut shape = h.net.graph().shapes[&h.input].clone();
    shape[0] = batch;
    // SAFETY: the caller provides `batch * sample_in` readable floats.
    let values = unsafe { std::slice::from_raw_parts(data, batch * h.sample_in) };
    let dtype = h.net.graph().dtypes[&h.input];
    Ok(Tensor::from_f32_with(dtype, &shape, values)?)
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn qmix_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qmix_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a graph, optionally with a model file, rewrites it to
/// `precision` ("fp32", "fp16", "int16", "int8"; null keeps the graph's
/// own types) and prepares it for inference. Quantized precisions need a
/// calibrated model.
///
/// # Safety
/// String arguments are null or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn qmix_net_load(
    graph_path: *const c_char,
    model_path: *const c_char,
    precision: *const c_char,
    seed: u64,
    out: *mut *mut QmixNet,
) -> QmixStatus {
    guard(|| {
        if out.is_null() {
            return fail(QmixStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let mut spec = GraphSpec::load(req_str(graph_path, "graph_path")?)?;
        if let Some(p) = opt_str(precision, "precision")? {
            spec = apply_precision(&spec, parse_dtype(p)?);
        }
        let model = load_model(opt_str(model_path, "model_path")?)?;
        let mut h = build(&spec, model.as_ref(), seed)?;
        h.net.set_quant_mode(QuantMode::Quantized)?;
        *out = Box::into_raw(Box::new(h));
        Ok(())
    })
}

/// Releases a network. Null is ignored.
///
/// # Safety
/// `net` is null or came from [`qmix_net_load`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn qmix_net_free(net: *mut QmixNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Values per sample of the input and output blobs.
///
/// # Safety
/// `net` is a live handle; the out pointers are writable or null.
#[no_mangle]
pub unsafe extern "C" fn qmix_net_sample_sizes(net: *const QmixNet, input: *mut usize, output: *mut usize) -> QmixStatus {
    guard(|| {
        let h = net.as_ref().ok_or(Failure(QmixStatus::NullPointer, "net is null".into()))?;
        if !input.is_null() {
            *input = h.sample_in;
        }
        if !output.is_null() {
            *output = h.sample_out;
        }
        Ok(())
    })
}

/// Runs `batch` samples, row-major, and writes `batch * output_size`
/// floats to `output`. Nothing is written on failure.
///
/// # Safety
/// `input` holds `batch * input_size` floats; `output` has room for
/// `capacity` floats.
#[no_mangle]
pub unsafe extern "C" fn qmix_net_infer(
    net: *const QmixNet,
    input: *const f32,
    batch: usize,
    output: *mut f32,
    capacity: usize,
) -> QmixStatus {
    guard(|| {
        let h = net.as_ref().ok_or(Failure(QmixStatus::NullPointer, "net is null".into()))?;
        if output.is_null() {
            return fail(QmixStatus::NullPointer, "output is null");
        }
        let need = batch.saturating_mul(h.sample_out);
        if capacity < need {
            return fail(QmixStatus::BufferTooSmall, format!("output needs {need} floats, capacity {capacity}"));
        }
        let x = batch_tensor(h, input, batch)?;
        let mut outs = h.net.infer(&single_input(&h.input, x))?;
        let y = outs.remove(&h.output).expect("graph output present").to_f32_vec();
        ptr::copy_nonoverlapping(y.as_ptr(), output, y.len());
        Ok(())
    })
}

/// Observes `batch` FP32 samples and writes the calibrated model to
/// `model_out`, replacing it atomically.
///
/// # Safety
/// Strings are null or NUL-terminated; `samples` holds `batch` samples.
#[no_mangle]
pub unsafe extern "C" fn qmix_calibrate(
    graph_path: *const c_char,
    model_path: *const c_char,
    samples: *const f32,
    batch: usize,
    seed: u64,
    model_out: *const c_char,
) -> QmixStatus {
    guard(|| {
        let spec = GraphSpec::load(req_str(graph_path, "graph_path")?)?;
        let out = req_str(model_out, "model_out")?;
        if batch == 0 {
            return Err(Error::NoCalibrationData.into());
        }
        let model = load_model(opt_str(model_path, "model_path")?)?;
        let mut h = build(&spec, model.as_ref(), seed)?;
        h.net.set_quant_mode(QuantMode::Observe)?;
        let x = batch_tensor(&h, samples, batch)?;
        h.net.forward(&single_input(&h.input, x))?;
        h.net.model().save(out)?;
        Ok(())
    })
}

/// Emits kernel source for `op` ("relu") at `precision` in `dialect`
/// ("cuda" or "opencl"). `*source` receives a string to release with
/// [`qmix_string_free`]; `hash`, if not null, receives 32 bytes.
///
/// # Safety
/// Strings are NUL-terminated; `source` is writable; `hash` is null or
/// has room for 32 bytes.
#[no_mangle]
pub unsafe extern "C" fn qmix_emit_kernel(
    op: *const c_char,
    precision: *const c_char,
    dialect: *const c_char,
    source: *mut *mut c_char,
    hash: *mut u8,
) -> QmixStatus {
    guard(|| {
        if source.is_null() {
            return fail(QmixStatus::NullPointer, "source is null");
        }
        *source = ptr::null_mut();
        let dtype = parse_dtype(req_str(precision, "precision")?)?;
        let dialect: Dialect = req_str(dialect, "dialect")?.parse()?;
        let program = emit_program(req_str(op, "op")?, dtype, dialect)?;
        let text = CString::new(program.source).map_err(|_| Failure(QmixStatus::Internal, "source has a nul".into()))?;
        if !hash.is_null() {
            ptr::copy_nonoverlapping(program.content_hash.as_ptr(), hash, 32);
        }
        *source = text.into_raw();
        Ok(())
    })
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` is null or came from this library and is not used again.
#[no_mangle]
pub unsafe extern "C" fn qmix_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Peak activation bytes of a graph's memory plan, with or without buffer
/// reuse, after optionally rewriting it to `precision`.
///
/// # Safety
/// Strings are null or NUL-terminated; `peak_bytes` is writable.
#[no_mangle]
pub unsafe extern "C" fn qmix_mem_plan(
    graph_path: *const c_char,
    precision: *const c_char,
    reuse: bool,
    peak_bytes: *mut usize,
) -> QmixStatus {
    guard(|| {
        if peak_bytes.is_null() {
            return fail(QmixStatus::NullPointer, "peak_bytes is null");
        }
        let mut spec = GraphSpec::load(req_str(graph_path, "graph_path")?)?;
        if let Some(p) = opt_str(precision, "precision")? {
            spec = apply_precision(&spec, parse_dtype(p)?);
        }
        let g = validate(&spec).into_result()?;
        *peak_bytes = plan_memory(&g, reuse).peak_bytes;
        Ok(())
    })
}
