//! Acceptance suite: one PASS/FAIL line per criterion, tolerances and
//! runtime budgets pinned below. Exits non-zero on any failure that is not
//! listed in `KNOWN_DEVIATIONS`, or if a listed one starts passing.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use cnnflow::bundled;
use cnnflow::costmodel::{
    bandwidth_cap_factor, estimate_kernel_resources, estimate_resources, fits, lsu_count, DeviceProfile, ELEM_BYTES,
};
use cnnflow::emit::{compile, CompileOptions};
use cnnflow::loopir::{compare_tensors, interpret_plan, lower_layer, synth_input, IrError, DEFAULT_MAX_STEPS};
use cnnflow::netdef::{count_flops, flop_share, GroupKey, LayerKind, LayerOp, LayerSpec, NetworkGraph, Padding, Shape};
use cnnflow::plan::{build_plan, reference_plan, ExecutionPlan, Limit, ModeRequest, PlanDump, PlanOptions};
use cnnflow::xform::{strip_mine, XformError};
use common::*;
use rand::Rng;
use serde_json::Value;

const LENET_FLOPS: f64 = 389e3;
const LENET_FLOPS_TOL: f64 = 0.05;
const MOBILENET_FLOPS: f64 = 1.11e9;
const MOBILENET_FLOPS_TOL: f64 = 0.02;
const POINTWISE_SHARE: f64 = 0.949;
const POINTWISE_SHARE_TOL: f64 = 0.005;
const BANDWIDTH_CAP: usize = 76;
const LENET_CHANNEL_DEPTH: usize = 256;
const CASES_PER_TRANSFORM: u64 = 100;
const E2E_TOLERANCE: f32 = 1e-4;
const E2E_SEEDS: std::ops::Range<u64> = 0..5;
const RANDOM_PLANS: usize = 50;

/// Criteria that cannot be met as stated; see the README.
const KNOWN_DEVIATIONS: [(u32, &str); 1] =
    [(1, "MobileNetV1 counts 1.1476e9 FLOPs under 2*MACs + elementwise ops, 3.4% over 1.11e9")];

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(x: f64, target: f64, rel: f64) -> bool {
    ((x - target) / target).abs() <= rel
}

fn plan(g: &NetworkGraph, d: &DeviceProfile, mode: ModeRequest) -> Result<ExecutionPlan, String> {
    build_plan(g, d, PlanOptions { mode, of_enabled: true }).map_err(|e| e.to_string())
}

fn c1_flops() -> Outcome {
    let lenet = count_flops(&bundled::lenet5()).total_flops as f64;
    let mobilenet = bundled::mobilenet_v1();
    let mn = count_flops(&mobilenet).total_flops as f64;
    let share = flop_share(&mobilenet, &GroupKey::new(LayerKind::Conv2d, 1, 1, 1));
    let detail = format!("lenet {lenet:.0}, mobilenet {mn:.4e}, 1x1 s1 share {share:.4}");
    let mut bad = Vec::new();
    if !within(lenet, LENET_FLOPS, LENET_FLOPS_TOL) {
        bad.push("lenet");
    }
    if !within(mn, MOBILENET_FLOPS, MOBILENET_FLOPS_TOL) {
        bad.push("mobilenet total");
    }
    if (share - POINTWISE_SHARE).abs() > POINTWISE_SHARE_TOL {
        bad.push("1x1 share");
    }
    if bad.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; out of range: {}", bad.join(", ")))
    }
}

fn c2_bandwidth_cap() -> Outcome {
    let cap = bandwidth_cap_factor(&bundled::s10sx(), 4);
    ensure(cap == BANDWIDTH_CAP, format!("cap {cap}"))?;
    Ok(format!("cap {cap} floats/cycle"))
}

fn c3_channel_depth() -> Outcome {
    let p = plan(&bundled::lenet5(), &bundled::s10sx(), ModeRequest::Auto)?;
    let dump = PlanDump::new(&p);
    let conv_kernels: Vec<&str> = p
        .kernels
        .iter()
        .filter(|k| k.origin.as_ref().is_some_and(|o| o.layer.kind() == LayerKind::Conv2d))
        .map(|k| k.id.as_str())
        .collect();
    let hit = dump
        .channels
        .iter()
        .find(|c| conv_kernels.contains(&c.producer.as_str()) && c.depth == LENET_CHANNEL_DEPTH)
        .ok_or_else(|| format!("no conv output channel of depth {LENET_CHANNEL_DEPTH}: {:?}", dump.channels))?;
    ensure(hit.depth_bytes == 1024, format!("{} is {} bytes", hit.name, hit.depth_bytes))?;
    Ok(format!("{} depth {} ({} bytes)", hit.name, hit.depth, hit.depth_bytes))
}

fn report_json(g: &NetworkGraph) -> Result<Value, String> {
    let c = compile(g, &bundled::s10sx(), CompileOptions::default());
    if let Some(e) = c.error {
        return Err(e.to_string());
    }
    serde_json::from_str(&c.report.to_json()).map_err(|e| e.to_string())
}

fn c4_mode_selection() -> Outcome {
    let has = |r: &Value, o: &str| r["optimizations"].as_array().unwrap().iter().any(|v| v == o);
    let mut lines = Vec::new();
    let lenet = report_json(&bundled::lenet5())?;
    ensure(lenet["mode"]["selected"] == "pipelined", "lenet not pipelined")?;
    ensure(["CH", "AR", "CE"].iter().all(|o| has(&lenet, o)) && !has(&lenet, "PK"), "lenet optimizations")?;
    lines.push(format!("lenet5 pipelined {}", lenet["optimizations"]));
    for g in [bundled::mobilenet_v1(), bundled::resnet34()] {
        let r = report_json(&g)?;
        ensure(r["mode"]["selected"] == "folded", format!("{} not folded", g.name))?;
        ensure(
            has(&r, "PK") && has(&r, "LT") && !["CH", "AR", "CE"].iter().any(|o| has(&r, o)),
            format!("{} optimizations {}", g.name, r["optimizations"]),
        )?;
        lines.push(format!("{} folded {}", g.name, r["optimizations"]));
    }
    Ok(lines.join("; "))
}

fn c5_oracle_equivalence() -> Outcome {
    let mut worst = 0f32;
    for t in TRANSFORMS {
        for i in 0..CASES_PER_TRANSFORM {
            let case = random_case(t, &mut rng(0xACCE_0000 + i));
            for run in &case.runs {
                let want = reference_output(run, i);
                let strict = candidate_output(run, i, false);
                let bitwise = strict.shape == want.shape
                    && strict.data.iter().zip(&want.data).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(bitwise, format!("{}: not bitwise equal with OF off", case.name))?;
                let err = compare_tensors(&candidate_output(run, i, true), &want)?;
                ensure(err <= OF_TOLERANCE, format!("{}: OF error {err:e}", case.name))?;
                worst = worst.max(err);
            }
        }
    }
    Ok(format!("{} transforms x {CASES_PER_TRANSFORM} cases, worst OF error {worst:.2e}", TRANSFORMS.len()))
}

fn e2e(g: &NetworkGraph, mode: ModeRequest) -> Result<f32, String> {
    let p = plan(g, &bundled::s10sx(), mode)?;
    let reference = reference_plan(g).map_err(|e| e.to_string())?;
    let mut worst = 0f32;
    for seed in E2E_SEEDS {
        let w = reference.synth_weights(seed).map_err(|e| e.to_string())?;
        let x = synth_input(seed, &g.input_shape.dims());
        let want = interpret_plan(&reference, &x, &w, DEFAULT_MAX_STEPS).map_err(|e| e.to_string())?;
        let got = interpret_plan(&p, &x, &w, DEFAULT_MAX_STEPS).map_err(|e| e.to_string())?;
        let err = compare_tensors(&got.output, &want.output)?;
        ensure(err <= E2E_TOLERANCE, format!("{} seed {seed}: error {err:e}", g.name))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn c6_end_to_end() -> Outcome {
    let lenet = e2e(&bundled::lenet5(), ModeRequest::Pipelined)?;
    let mn = bundled::mobilenet_v1();
    let small = mn.with_input_shape(Shape::new(mn.input_shape.c, 32, 32)).map_err(|e| e.to_string())?;
    let mobilenet = e2e(&small, ModeRequest::Folded)?;
    Ok(format!("lenet5 pipelined {lenet:.2e}, mobilenetv1@32 folded {mobilenet:.2e} (seeds 0-4)"))
}

fn factor_requirements(p: &ExecutionPlan, d: &DeviceProfile) -> Result<(), String> {
    let cap = bandwidth_cap_factor(d, ELEM_BYTES);
    for f in &p.factors {
        ensure(f.candidates.contains(&f.chosen), format!("{f:?} not a candidate"))?;
        ensure(f.extents.iter().all(|e| e % f.chosen == 0), format!("{f:?} does not divide"))?;
    }
    for k in &p.kernels {
        ensure(max_global_span(k) <= cap, format!("{} exceeds the bandwidth cap", k.id))?;
    }
    let fit = fits(&estimate_resources(p, d), d);
    ensure(fit.fits, format!("{} does not fit: {fit:?}", p.network))
}

fn c7_requirements() -> Outcome {
    let d = bundled::s10sx();
    let mut checked = 0;
    for g in [bundled::lenet5(), bundled::mobilenet_v1(), bundled::resnet34()] {
        factor_requirements(&plan(&g, &d, ModeRequest::Auto)?, &d)?;
        checked += 1;
    }
    let mut r = rng(0xACCE_0007);
    for _ in 0..40 {
        let g = random_network(&mut r);
        for mode in [ModeRequest::Pipelined, ModeRequest::Folded] {
            factor_requirements(&plan(&g, &d, mode)?, &d)?;
            checked += 1;
        }
    }
    let mut starved = d.clone();
    starved.dsps = 40;
    let roomy = plan(&bundled::lenet5(), &d, ModeRequest::Auto)?;
    let tight = plan(&bundled::lenet5(), &starved, ModeRequest::Auto)?;
    factor_requirements(&tight, &starved)?;
    let limited = roomy
        .factors
        .iter()
        .zip(&tight.factors)
        .find(|(a, b)| b.chosen < a.chosen && b.limit == Limit::Resources)
        .ok_or("DSP-starved profile did not shrink a factor for resources")?;
    let conv = LayerSpec::new(
        "c",
        LayerOp::Conv2d { filters: 2, kh: 3, kw: 3, stride: 1, padding: Padding::Same, bias: false },
        &["input"],
    );
    let k = lower_layer(&conv, &[Shape::new(1, 28, 28)]).map_err(|e| e.to_string())?;
    ensure(
        matches!(strip_mine(&k, "oy", 5), Err(XformError::NonDivisible { .. })),
        "strip_mine(28, 5) accepted",
    )?;
    Ok(format!(
        "{checked} plans satisfy all three; dsps=40 shrinks {}.{} {}->{} (resources); 28/5 NonDivisible",
        limited.1.kernel, limited.1.loop_var, limited.0.chosen, limited.1.chosen
    ))
}

fn c8_cost_oracle() -> Outcome {
    let d = bundled::s10sx();
    let mut r = rng(0xACCE_0008);
    let mut kernels = 0;
    for _ in 0..RANDOM_PLANS {
        let g = random_network(&mut r);
        let mode = if r.gen_bool(0.5) { ModeRequest::Folded } else { ModeRequest::Pipelined };
        let p = plan(&g, &d, mode)?;
        for k in &p.kernels {
            let (est, brute) = (estimate_kernel_resources(k, &d).dsps, brute_force_mac_lanes(k));
            ensure(est == brute, format!("{}: estimated {est} DSPs, walk counts {brute}", k.id))?;
            kernels += 1;
        }
    }
    let mut fused = 0;
    for _ in 0..200 {
        let (l, s) = random_compute_layer(&mut r);
        let p = lower_layer(&l, &[s]).map_err(|e| e.to_string())?;
        let dims: Vec<usize> = p.buffer("output").unwrap().shape.iter().filter_map(|d| d.as_const()).collect();
        let shape = match dims[..] {
            [c, h, w] => Shape::new(c, h, w),
            [c] => Shape::new(c, 1, 1),
            _ => continue,
        };
        for op in [LayerOp::Relu, LayerOp::Relu6, LayerOp::Batchnorm] {
            let q = lower_layer(&LayerSpec::new("q", op, &["l"]), &[shape]).map_err(|e| e.to_string())?;
            if let Ok(f) = cnnflow::xform::fuse_postop(&p, &q) {
                let (after, before) = (lsu_count(&f), lsu_count(&p) + lsu_count(&q));
                ensure(after < before, format!("{}: fusion left {after} LSUs of {before}", f.id))?;
                fused += 1;
            }
        }
    }
    Ok(format!("{RANDOM_PLANS} plans / {kernels} kernels exact; {fused} fusions all reduce LSUs"))
}

fn c9_deadlock() -> Outcome {
    let g = reconvergent_graph();
    let p = plan(&g, &bundled::s10sx(), ModeRequest::Pipelined)?;
    let w = reference_plan(&g).map_err(|e| e.to_string())?.synth_weights(0).map_err(|e| e.to_string())?;
    let x = synth_input(0, &g.input_shape.dims());
    let bypass = p
        .channels
        .iter()
        .position(|c| c.producer == "p" && c.consumer == "c")
        .ok_or("fixture has no bypass channel")?;
    let mut shallow = p.clone();
    shallow.channels[bypass].depth = 1;
    match interpret_plan(&shallow, &x, &w, DEFAULT_MAX_STEPS) {
        Err(IrError::DeadlockDetected { .. }) => {}
        other => return Err(format!("depth 1 did not deadlock: {:?}", other.map(|_| ()))),
    }
    interpret_plan(&p, &x, &w, DEFAULT_MAX_STEPS).map_err(|e| format!("planned depths: {e}"))?;
    Ok(format!("depth 1 deadlocks, planned depth {} completes", p.channels[bypass].depth))
}

fn c10_determinism() -> Outcome {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = Command::new(env!("CARGO_BIN_EXE_cnnflow"))
            .arg("compile")
            .arg(root.join("models/lenet5.json"))
            .arg("--device")
            .arg(root.join("devices/s10sx.json"))
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), String::from_utf8_lossy(&o.stderr).to_string())?;
        let files: BTreeMap<&str, Vec<u8>> = ["kernels.cl", "host_plan.json", "report.json"]
            .into_iter()
            .map(|f| (f, fs::read(out.join(f)).unwrap_or_default()))
            .collect();
        outputs.push(files);
    }
    for (f, a) in &outputs[0] {
        ensure(!a.is_empty() && *a == outputs[1][f], format!("{f} differs between runs"))?;
    }
    Ok("kernels.cl, host_plan.json, report.json byte-identical".into())
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { id: 1, name: "FLOP accounting", budget: secs(1), run: c1_flops },
        Criterion { id: 2, name: "bandwidth cap", budget: secs(1), run: c2_bandwidth_cap },
        Criterion { id: 3, name: "channel depth", budget: secs(1), run: c3_channel_depth },
        Criterion { id: 4, name: "mode selection", budget: secs(10), run: c4_mode_selection },
        Criterion { id: 5, name: "oracle equivalence", budget: secs(120), run: c5_oracle_equivalence },
        Criterion { id: 6, name: "end-to-end correctness", budget: secs(300), run: c6_end_to_end },
        Criterion { id: 7, name: "factor requirements", budget: secs(30), run: c7_requirements },
        Criterion { id: 8, name: "cost-model oracle", budget: secs(30), run: c8_cost_oracle },
        Criterion { id: 9, name: "deadlock detection", budget: secs(10), run: c9_deadlock },
        Criterion { id: 10, name: "determinism", budget: secs(60), run: c10_determinism },
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut unexpected = 0;
    for c in &criteria {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let took = t.elapsed();
        let outcome = match outcome {
            Ok(d) if took > c.budget => Err(format!("{d}; took {took:.2?}, budget {:?}", c.budget)),
            o => o,
        };
        let known = KNOWN_DEVIATIONS.iter().find(|(id, _)| *id == c.id);
        match (&outcome, known) {
            (Ok(d), None) => println!("PASS {} {}: {d} [{took:.2?}]", c.id, c.name),
            (Ok(d), Some(_)) => {
                unexpected += 1;
                println!("PASS {} {}: {d} [{took:.2?}] (listed as a known deviation; update the list)", c.id, c.name);
            }
            (Err(d), Some((_, why))) => {
                println!("FAIL {} {}: {d} [{took:.2?}] (known deviation: {why})", c.id, c.name)
            }
            (Err(d), None) => {
                unexpected += 1;
                println!("FAIL {} {}: {d} [{took:.2?}]", c.id, c.name);
            }
        }
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

