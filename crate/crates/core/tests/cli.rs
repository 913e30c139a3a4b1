use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn model(name: &str) -> PathBuf {
    root().join("models").join(format!("{name}.json"))
}

fn device() -> PathBuf {
    root().join("devices/s10sx.json")
}

fn compile(args: &[&str], model: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cnnflow"))
        .arg("compile")
        .arg(model)
        .arg("--device")
        .arg(device())
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const ARTIFACTS: [&str; 4] = ["kernels.cl", "host_plan.json", "report.json", "build_flags.txt"];

#[test]
fn lenet_auto_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = compile(&[], &model("lenet5"), dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for a in ARTIFACTS {
        let text = fs::read_to_string(dir.path().join(a)).unwrap();
        assert!(text.contains("format_version"), "{a}");
    }
    let r = json(&dir.path().join("report.json"));
    assert_eq!(r["status"], "ok");
    assert_eq!(r["mode"]["selected"], "pipelined");
    let opts: Vec<&str> = r["optimizations"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    for o in ["CH", "AR", "CE"] {
        assert!(opts.contains(&o), "{opts:?}");
    }
    assert!(!opts.contains(&"PK"));
    let flags = fs::read_to_string(dir.path().join("build_flags.txt")).unwrap();
    assert_eq!(flags, "# format_version: 1\n-fp-relaxed -fpc\n");
    let h = json(&dir.path().join("host_plan.json"));
    assert_eq!(h["mode"], "pipelined");
    assert_eq!(h["format_version"], 1);
}

#[test]
fn compilation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(compile(&["--seed", "3"], &model("lenet5"), d.path()).status.success());
    }
    for f in ARTIFACTS {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn verify_records_the_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = compile(&["--verify", "--seed", "2"], &model("lenet5"), dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = &json(&dir.path().join("report.json"))["verification"];
    assert_eq!(v["passed"], true);
    assert_eq!(v["reduced"], false);
    assert_eq!(v["seed"], 2);
    assert!(v["max_rel_err"].as_f64().unwrap() <= 1e-4);
}

#[test]
fn strict_fp_drops_relaxed_flags() {
    let dir = tempfile::tempdir().unwrap();
    assert!(compile(&["--strict-fp", "--mode", "folded"], &model("lenet5"), dir.path()).status.success());
    let flags = fs::read_to_string(dir.path().join("build_flags.txt")).unwrap();
    assert_eq!(flags, "# format_version: 1\n\n");
    let r = json(&dir.path().join("report.json"));
    assert_eq!(r["mode"]["selected"], "folded");
    assert_eq!(r["build"]["of_enabled"], false);
}

#[test]
fn large_networks_fold_with_parameterized_kernels() {
    for name in ["mobilenetv1", "resnet34"] {
        let dir = tempfile::tempdir().unwrap();
        let o = compile(&[], &model(name), dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let r = json(&dir.path().join("report.json"));
        assert_eq!(r["mode"]["selected"], "folded");
        let opts: Vec<&str> = r["optimizations"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        assert!(opts.contains(&"PK") && opts.contains(&"LT"), "{opts:?}");
        assert!(!opts.iter().any(|o| ["CH", "AR", "CE"].contains(o)), "{opts:?}");
    }
}

#[test]
fn forced_pipelined_mobilenet_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r/report.json");
    let o = compile(
        &["--mode", "pipelined", "--report", report.to_str().unwrap()],
        &model("mobilenetv1"),
        &dir.path().join("build"),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bram_bits"));
    let r = json(&report);
    assert_eq!(r["status"], "error");
    assert_eq!(r["error"]["kind"], "override_infeasible");
    assert_eq!(r["error"]["constraint"], "bram_bits");
    assert!(!dir.path().join("build/kernels.cl").exists());
}

#[test]
fn bad_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = compile(&[], &dir.path().join("missing.json"), dir.path());
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"input_shape": [1, 4, 4], "layers": [{"id": "x", "kind": "warp"}]}"#).unwrap();
    assert_eq!(compile(&[], &bad, dir.path()).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_cnnflow"))
        .args(["compile", model("lenet5").to_str().unwrap(), "--device"])
        .arg(device())
        .args(["--mode", "sideways"])
        .output()
        .unwrap();
    assert!(!o.status.success());
}
