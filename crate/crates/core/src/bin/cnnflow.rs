use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use cnnflow::costmodel::DeviceProfile;
use cnnflow::emit::{compile, write_bundle, CompileOptions};
use cnnflow::netdef::parse_network;
use cnnflow::plan::ModeRequest;

#[derive(Parser)]
#[command(name = "cnnflow", version, about = "Compile CNN graphs into dataflow kernel plans")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Plan, estimate and emit kernels for a network.
    Compile {
        /// Network description (JSON).
        model: PathBuf,
        /// Device profile (JSON).
        #[arg(long)]
        device: PathBuf,
        #[arg(long, default_value = "auto")]
        mode: ModeRequest,
        /// Check the optimized plan against the reference interpreter.
        #[arg(long)]
        verify: bool,
        /// Seed for synthetic weights and inputs used by --verify.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep strict float ordering (no -fp-relaxed -fpc).
        #[arg(long)]
        strict_fp: bool,
        #[arg(long, default_value = "build")]
        out: PathBuf,
        /// Where to write report.json (default: inside --out).
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let Cmd::Compile { model, device, mode, verify, seed, strict_fp, out, report } = cli.cmd;
    let text = fs::read_to_string(&model).with_context(|| format!("reading model {}", model.display()))?;
    let graph = parse_network(&text).with_context(|| format!("parsing {}", model.display()))?;
    let dev = DeviceProfile::load(&device).with_context(|| format!("loading device {}", device.display()))?;
    let opts = CompileOptions { mode, of_enabled: !strict_fp, verify, seed };
    let c = compile(&graph, &dev, opts);
    let report_path = report.unwrap_or_else(|| out.join("report.json"));
    if let Some(b) = &c.bundle {
        write_bundle(&out, b)?;
    }
    if let Some(dir) = report_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&report_path, c.report.to_json()).with_context(|| format!("writing {}", report_path.display()))?;
    match &c.error {
        Some(e) => {
            eprintln!("error: {e}");
            if let Some(r) = e.constraint() {
                eprintln!("limiting constraint: {r}");
            }
            eprintln!("report written to {}", report_path.display());
            Ok(false)
        }
        None => {
            let mode = c.plan.as_ref().map(|p| p.mode.to_string()).unwrap_or_default();
            println!("{}: {mode} plan written to {}", graph.name, out.display());
            if let Some(v) = &c.report.verification {
                println!("verified at {:?}: max relative error {:e}", v.input_shape, v.max_rel_err);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
