use std::fs;
use std::path::Path;

use super::report::{BuildSection, Report, ReportError, Verification};
use super::{build_flags, emit_host_plan, emit_kernels, smoke_check, EmissionBundle, EmitError};
use crate::costmodel::{estimate_resources, estimate_throughput, fits, DeviceProfile};
use crate::loopir::{compare_tensors, interpret_plan, synth_input, DEFAULT_MAX_STEPS};
use crate::netdef::{count_flops, NetworkGraph, Shape};
use crate::plan::{build_plan, reference_plan, ExecutionPlan, Mode, ModeRequest, PlanDump, PlanOptions};
use crate::Error;

/// Networks above this many FLOPs are verified at [`VERIFY_REDUCED_HW`].
pub const VERIFY_FLOP_LIMIT: u64 = 50_000_000;
pub const VERIFY_REDUCED_HW: usize = 32;
/// Relative tolerance of the end-to-end check.
pub const VERIFY_TOLERANCE: f32 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompileOptions {
    pub mode: ModeRequest,
    pub of_enabled: bool,
    pub verify: bool,
    pub seed: u64,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions { mode: ModeRequest::Auto, of_enabled: true, verify: false, seed: 0 }
    }
}

/// Result of one compiler run. The report is always present; the plan and
/// bundle only when planning succeeded.
#[derive(Debug)]
pub struct Compiled {
    pub plan: Option<ExecutionPlan>,
    pub bundle: Option<EmissionBundle>,
    pub report: Report,
    pub error: Option<Error>,
}

/// Optimized plan against the unoptimized reference on synthetic data.
/// Large networks are re-planned at a reduced input in the same mode.
pub fn verify_plan(
    graph: &NetworkGraph,
    plan: &ExecutionPlan,
    device: &DeviceProfile,
    seed: u64,
) -> Result<Verification, Error> {
    let reduced = count_flops(graph).total_flops > VERIFY_FLOP_LIMIT;
    let (g, p);
    let (graph, plan) = if reduced {
        let s = graph.input_shape;
        g = graph.with_input_shape(Shape::new(s.c, VERIFY_REDUCED_HW, VERIFY_REDUCED_HW))?;
        let mode = match plan.mode {
            Mode::Pipelined => ModeRequest::Pipelined,
            Mode::Folded => ModeRequest::Folded,
        };
        p = build_plan(&g, device, PlanOptions { mode, of_enabled: plan.of_enabled })?;
        (&g, &p)
    } else {
        (graph, plan)
    };
    let reference = reference_plan(graph)?;
    let weights = reference.synth_weights(seed)?;
    let input = synth_input(seed, &graph.input_shape.dims());
    let want = interpret_plan(&reference, &input, &weights, DEFAULT_MAX_STEPS)?;
    let got = interpret_plan(plan, &input, &weights, DEFAULT_MAX_STEPS)?;
    let err = compare_tensors(&got.output, &want.output).map_err(Error::Verification)?;
    Ok(Verification {
        input_shape: graph.input_shape.dims(),
        reduced,
        seed,
        max_rel_err: err,
        tolerance: VERIFY_TOLERANCE,
        passed: err <= VERIFY_TOLERANCE,
    })
}

fn fail(mut c: Compiled, e: Error) -> Compiled {
    c.report.status = "error";
    c.report.error = Some(ReportError { kind: e.kind().to_string(), message: e.to_string(), constraint: e.constraint() });
    c.error = Some(e);
    c
}

/// parse → lower → transform → plan → estimate → (verify) → emit.
pub fn compile(graph: &NetworkGraph, device: &DeviceProfile, opts: CompileOptions) -> Compiled {
    let mut plan_probe = ExecutionPlan::empty(&graph.name, Mode::Folded);
    plan_probe.of_enabled = opts.of_enabled;
    let build = BuildSection { of_enabled: opts.of_enabled, flags: build_flags(&plan_probe) };
    let report = Report::new(&graph.name, &device.name, opts.mode, count_flops(graph), build);
    let mut c = Compiled { plan: None, bundle: None, report, error: None };

    let plan = match build_plan(graph, device, PlanOptions { mode: opts.mode, of_enabled: opts.of_enabled }) {
        Ok(p) => p,
        Err(e) => return fail(c, e.into()),
    };
    let r = &mut c.report;
    r.mode = plan.decision.clone();
    r.optimizations = plan.optimizations();
    r.plan = Some(PlanDump::new(&plan));
    r.factors = plan.factors.clone();
    let res = estimate_resources(&plan, device);
    r.fit = Some(fits(&res, device));
    r.resources = Some(res);
    match estimate_throughput(&plan, device) {
        Ok(t) => r.throughput = Some(t),
        Err(e) => return fail(c, e.into()),
    }
    if opts.verify {
        match verify_plan(graph, &plan, device, opts.seed) {
            Ok(v) => {
                let (passed, err, tol) = (v.passed, v.max_rel_err, v.tolerance);
                c.report.verification = Some(v);
                if !passed {
                    return fail(c, Error::Verification(format!("max relative error {err:e} exceeds {tol:e}")));
                }
            }
            Err(e) => return fail(c, e),
        }
    }
    let bundle = match bundle(&plan, &c.report) {
        Ok(b) => b,
        Err(e) => return fail(c, e.into()),
    };
    c.plan = Some(plan);
    c.bundle = Some(bundle);
    c
}

fn bundle(plan: &ExecutionPlan, report: &Report) -> Result<EmissionBundle, EmitError> {
    let kernel_source = emit_kernels(plan)?;
    smoke_check(&kernel_source).map_err(EmitError::Smoke)?;
    let host = emit_host_plan(plan)?;
    let mut host_plan = serde_json::to_string_pretty(&host).expect("host plan serializes");
    host_plan.push('\n');
    Ok(EmissionBundle { kernel_source, host_plan, build_flags: build_flags(plan), report: report.to_json() })
}

/// Writes `kernels.cl`, `host_plan.json`, `report.json` and
/// `build_flags.txt` into `dir`.
pub fn write_bundle(dir: &Path, b: &EmissionBundle) -> Result<(), EmitError> {
    let io = |e: std::io::Error| EmitError::Io(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    fs::write(dir.join("kernels.cl"), &b.kernel_source).map_err(io)?;
    fs::write(dir.join("host_plan.json"), &b.host_plan).map_err(io)?;
    fs::write(dir.join("report.json"), &b.report).map_err(io)?;
    fs::write(dir.join("build_flags.txt"), super::build_flags_text(&b.build_flags)).map_err(io)?;
    Ok(())
}
