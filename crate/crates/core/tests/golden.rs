//! LeNet-5 artifacts against checked-in copies. Regenerate with
//! `UPDATE_GOLDEN=1 cargo test --test golden`.

use std::fs;
use std::path::PathBuf;

use cnnflow::bundled;
use cnnflow::emit::{build_flags_text, compile, CompileOptions};

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn check(name: &str, actual: &str) {
    let path = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&path, actual).unwrap();
        return;
    }
    let want = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(want == actual, "{name} differs from {}", path.display());
}

#[test]
fn lenet_artifacts_match_golden() {
    let c = compile(&bundled::lenet5(), &bundled::s10sx(), CompileOptions::default());
    let b = c.bundle.expect("lenet compiles");
    check("lenet5_kernels.cl", &b.kernel_source);
    check("lenet5_host_plan.json", &b.host_plan);
    check("lenet5_build_flags.txt", &build_flags_text(&b.build_flags));
}
