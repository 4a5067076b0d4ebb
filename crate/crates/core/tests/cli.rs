use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qmix")).args(args).output().expect("spawn qmix")
}

fn testdata(name: &str) -> String {
    format!("{}/testdata/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn calibration_csv(dir: &Path) -> PathBuf {
    let p = dir.join("calib.csv");
    let rows: String = (-273..=1000).map(|c| format!("{c}\n")).collect();
    std::fs::write(&p, format!("celsius\n{rows}")).unwrap();
    p
}

#[test]
fn observe_then_infer_int8() {
    let dir = tempfile::tempdir().unwrap();
    let calib = calibration_csv(dir.path());
    let model = dir.path().join("celsius.qcnm");
    let o = qmix(&["observe", "--graph", &testdata("celsius.json"), "--in", s(&calib), "--out", s(&model)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("celsius,-273,1000")), "{}", stdout(&o));
    assert!(model.exists());

    let probe = dir.path().join("probe.csv");
    std::fs::write(&probe, "-40\n0\n100\n").unwrap();
    let out = dir.path().join("pred.csv");
    let o = qmix(&[
        "infer", "--graph", &testdata("celsius.json"), "--model", s(&model), "--precision", "int8", "--in", s(&probe),
        "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let expected = [-40.0f32, 32.0, 212.0];
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for (i, (line, want)) in lines.iter().zip(expected).enumerate() {
        let mut f = line.split(',');
        assert_eq!(f.next().unwrap(), i.to_string());
        let got: f32 = f.next().unwrap().parse().unwrap();
        assert!((got - want).abs() <= 8.74, "sample {i}: {got} vs {want}");
    }
}

#[test]
fn int8_without_calibration_fails() {
    let dir = tempfile::tempdir().unwrap();
    let probe = dir.path().join("probe.csv");
    std::fs::write(&probe, "1\n").unwrap();
    let out = dir.path().join("pred.csv");
    let o = qmix(&["infer", "--graph", &testdata("celsius.json"), "--precision", "int8", "--in", s(&probe), "--out", s(&out)]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("model not calibrated"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(!out.exists(), "no partial output on failure");
}

#[test]
fn observe_without_samples_fails() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "celsius\n").unwrap();
    let model = dir.path().join("m.qcnm");
    let o = qmix(&["observe", "--graph", &testdata("celsius.json"), "--in", s(&empty), "--out", s(&model)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no calibration data"), "{}", stderr(&o));
    assert!(!model.exists());
}

#[test]
fn invalid_graph_reports_every_violation_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("bad.json");
    std::fs::write(
        &g,
        r#"{"name":"bad","layers":[
            {"name":"a","type":"RELU","bottoms":["x"],"tops":["y"]},
            {"name":"a","type":"RELU","bottoms":["y"],"tops":["z"]}
        ]}"#,
    )
    .unwrap();
    let o = qmix(&["mem-plan", "--graph", s(&g)]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("never produced") && err.contains("duplicate layer name"), "{err}");
}

#[test]
fn emit_kernel_writes_source_and_stable_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("kernels.cache");
    let mut hashes = Vec::new();
    for (i, dialect) in ["cuda", "opencl", "cuda"].iter().enumerate() {
        let out = dir.path().join(format!("relu{i}.src"));
        let o = qmix(&[
            "emit-kernel", "--op", "relu", "--precision", "int8", "--dialect", dialect, "--out", s(&out), "--cache",
            s(&cache),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let hash = stdout(&o).trim().to_string();
        assert_eq!(hash.len(), 64);
        let src = std::fs::read_to_string(&out).unwrap();
        assert!(src.contains("ReLUForward"));
        hashes.push(hash);
    }
    assert_eq!(hashes[0], hashes[2]);
    assert_ne!(hashes[0], hashes[1]);
    assert!(cache.exists());

    let o = qmix(&["emit-kernel", "--op", "conv", "--precision", "int8", "--dialect", "cuda", "--out", "x"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unsupported"));
}

#[test]
fn mem_plan_prints_both_tables() {
    let o = qmix(&["mem-plan", "--graph", &testdata("chain8.json")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("reuse=false slots=9"), "{text}");
    assert!(text.contains("reuse=true slots=2"), "{text}");
    assert!(text.trim_end().ends_with("ratio 9:2 (77.8% saved)"));
    let o = qmix(&["mem-plan", "--graph", &testdata("chain8.json"), "--reuse", "true"]);
    assert!(!stdout(&o).contains("reuse=false"));
}
