//! Full compile of LeNet-5 with verification, writing the four artifacts.
//!
//! cargo run --example emit_opencl [out-dir]

use std::path::PathBuf;

use cnnflow::bundled;
use cnnflow::emit::{compile, write_bundle, CompileOptions};

fn main() -> anyhow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "build/lenet5".into()));
    let opts = CompileOptions { verify: true, ..CompileOptions::default() };
    let c = compile(&bundled::lenet5(), &bundled::s10sx(), opts);
    if let Some(e) = c.error {
        anyhow::bail!(e);
    }
    let b = c.bundle.unwrap();
    write_bundle(&out, &b)?;
    let v = c.report.verification.unwrap();
    println!("verified: max relative error {:.2e} (tolerance {:.0e})", v.max_rel_err, v.tolerance);
    println!("wrote {}", out.display());
    for line in b.kernel_source.lines().take(12) {
        println!("  {line}");
    }
    Ok(())
}
