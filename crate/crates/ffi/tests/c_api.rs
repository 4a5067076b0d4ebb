use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use qmix_ffi::*;

fn celsius() -> CString {
    CString::new(format!("{}/../core/testdata/celsius.json", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = qmix_last_error();
    assert!(!p.is_null(), "an error message is recorded");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn calibrate(dir: &Path) -> CString {
    let model = cstr(dir.join("celsius.qcnm").to_str().unwrap());
    let samples: Vec<f32> = (-273..=1000).map(|c| c as f32).collect();
    let s = unsafe { qmix_calibrate(celsius().as_ptr(), ptr::null(), samples.as_ptr(), samples.len(), 0, model.as_ptr()) };
    assert_eq!(s, QmixStatus::Ok);
    model
}

#[test]
fn fp32_inference_through_handle() {
    let mut net = ptr::null_mut();
    let s = unsafe { qmix_net_load(celsius().as_ptr(), ptr::null(), ptr::null(), 0, &mut net) };
    assert_eq!(s, QmixStatus::Ok);
    let (mut i, mut o) = (0usize, 0usize);
    assert_eq!(unsafe { qmix_net_sample_sizes(net, &mut i, &mut o) }, QmixStatus::Ok);
    assert_eq!((i, o), (1, 1));
    let x = [100.0f32, 0.0, -40.0];
    let mut y = [0.0f32; 3];
    assert_eq!(unsafe { qmix_net_infer(net, x.as_ptr(), 3, y.as_mut_ptr(), 3) }, QmixStatus::Ok);
    assert_eq!(y, [212.0, 32.0, -40.0]);
    assert!(qmix_last_error().is_null());
    unsafe { qmix_net_free(net) };
}

#[test]
fn calibrated_int8_and_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = ptr::null_mut();
    let int8 = cstr("int8");
    let s = unsafe { qmix_net_load(celsius().as_ptr(), ptr::null(), int8.as_ptr(), 0, &mut net) };
    assert_eq!(s, QmixStatus::NotCalibrated);
    assert!(net.is_null());
    assert!(last_error().contains("model not calibrated"));

    let model = calibrate(dir.path());
    let s = unsafe { qmix_net_load(celsius().as_ptr(), model.as_ptr(), int8.as_ptr(), 0, &mut net) };
    assert_eq!(s, QmixStatus::Ok);
    let x: Vec<f32> = (-273..1000).map(|c| c as f32).collect();
    let mut y = vec![f32::NAN; x.len()];
    assert_eq!(unsafe { qmix_net_infer(net, x.as_ptr(), x.len(), y.as_mut_ptr(), 1) }, QmixStatus::BufferTooSmall);
    assert!(y.iter().all(|v| v.is_nan()), "nothing written on failure");
    assert_eq!(unsafe { qmix_net_infer(net, x.as_ptr(), x.len(), y.as_mut_ptr(), y.len()) }, QmixStatus::Ok);
    let worst = x.iter().zip(&y).map(|(c, f)| (f - (c * 1.8 + 32.0)).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 8.74, "{worst}");
    unsafe { qmix_net_free(net) };

    let bogus = cstr("int4");
    assert_eq!(unsafe { qmix_net_load(celsius().as_ptr(), ptr::null(), bogus.as_ptr(), 0, &mut net) }, QmixStatus::InvalidArgument);
    let missing = cstr("/nonexistent/graph.json");
    assert_eq!(unsafe { qmix_net_load(missing.as_ptr(), ptr::null(), ptr::null(), 0, &mut net) }, QmixStatus::Io);
    assert_eq!(unsafe { qmix_net_load(ptr::null(), ptr::null(), ptr::null(), 0, &mut net) }, QmixStatus::NullPointer);
    assert_eq!(unsafe { qmix_net_infer(ptr::null(), x.as_ptr(), 1, y.as_mut_ptr(), 1) }, QmixStatus::NullPointer);
    unsafe { qmix_net_free(ptr::null_mut()) };

    let out = cstr(dir.path().join("empty.qcnm").to_str().unwrap());
    let s = unsafe { qmix_calibrate(celsius().as_ptr(), ptr::null(), x.as_ptr(), 0, 0, out.as_ptr()) };
    assert_eq!(s, QmixStatus::NoCalibrationData);
}

#[test]
fn kernels_and_plans() {
    let mut src = ptr::null_mut();
    let mut hash = [0u8; 32];
    let (relu, int8, cuda) = (cstr("relu"), cstr("int8"), cstr("cuda"));
    assert_eq!(unsafe { qmix_emit_kernel(relu.as_ptr(), int8.as_ptr(), cuda.as_ptr(), &mut src, hash.as_mut_ptr()) }, QmixStatus::Ok);
    let text = unsafe { CStr::from_ptr(src) }.to_str().unwrap().to_string();
    unsafe { qmix_string_free(src) };
    let p = qmix::codegen::emit_relu_program(qmix::DataType::Int8Q, qmix::codegen::Dialect::Cuda).unwrap();
    assert_eq!(text, p.source);
    assert_eq!(hash, p.content_hash);

    let metal = cstr("metal");
    assert_eq!(unsafe { qmix_emit_kernel(relu.as_ptr(), int8.as_ptr(), metal.as_ptr(), &mut src, ptr::null_mut()) }, QmixStatus::Unsupported);
    assert!(src.is_null());

    let chain = cstr(&format!("{}/../core/testdata/chain8.json", env!("CARGO_MANIFEST_DIR")));
    let (mut off, mut on) = (0usize, 0usize);
    assert_eq!(unsafe { qmix_mem_plan(chain.as_ptr(), ptr::null(), false, &mut off) }, QmixStatus::Ok);
    assert_eq!(unsafe { qmix_mem_plan(chain.as_ptr(), ptr::null(), true, &mut on) }, QmixStatus::Ok);
    assert_eq!(on * 9, off * 2);
}

#[test]
fn errors_are_per_thread() {
    let missing = cstr("/nonexistent.json");
    let mut net = ptr::null_mut();
    unsafe { qmix_net_load(missing.as_ptr(), ptr::null(), ptr::null(), 0, &mut net) };
    assert!(!qmix_last_error().is_null());
    std::thread::spawn(|| assert!(qmix_last_error().is_null())).join().unwrap();
    assert!(unsafe { CStr::from_ptr(qmix_version()) }.to_str().unwrap().starts_with("0."));
}

#[test]
fn header_is_current() {
    let header = std::fs::read_to_string(format!("{}/include/qmix.h", env!("CARGO_MANIFEST_DIR"))).unwrap();
    for f in ["qmix_net_load", "qmix_net_infer", "qmix_net_free", "qmix_calibrate", "qmix_emit_kernel", "qmix_mem_plan", "qmix_last_error", "typedef struct QmixNet QmixNet", "QMIX_STATUS_NOT_CALIBRATED = 5"] {
        assert!(header.contains(f), "header lacks {f}");
    }
}

fn static_lib() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    [deps.join("libqmix_ffi.a"), deps.parent().unwrap().join("libqmix_ffi.a")]
        .into_iter()
        .find(|p| p.exists())
        .expect("libqmix_ffi.a next to the test binary")
}

/// Compiles and runs a C program against the generated header and the
/// static library.
#[test]
fn c_program_links_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let build = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(static_lib())
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .expect("C compiler available");
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&exe).arg(manifest.join("../core/testdata/celsius.json")).arg(dir.path().join("m.qcnm")).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
