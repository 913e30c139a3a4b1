//! Execution planning: mode selection, post-op fusion and cached writes,
//! kernel parameterization (folded) or channelization (pipelined), factor
//! choice under the bandwidth/divisibility/resource requirements, and
//! command-queue assignment.

mod channel;
mod factors;
mod mode;
mod stages;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{CostError, DeviceProfile};
use crate::loopir::{
    lower_layer, structural_check, synth_tensor, Bindings, ChannelDecl, IrError, KernelIR, MemSpace,
    Tensor, TensorRole,
};
use crate::netdef::{NetError, NetworkGraph, INPUT_ID};
use crate::xform::{XformError, XformStep};

pub use channel::{channel_depths, channelize, mark_autorun};
pub use factors::{choose_factors, tunable_loops, FactorChoice, Limit, OptKind, TuneTarget};
pub use mode::{onchip_bits, select_mode, ModeDecision};
pub use stages::{cache_stages, fuse_stages, lower_stages, parameterize_stages};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pipelined,
    Folded,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Pipelined => "pipelined",
            Mode::Folded => "folded",
        })
    }
}

/// Mode requested on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeRequest {
    Auto,
    Pipelined,
    Folded,
}

impl FromStr for ModeRequest {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(ModeRequest::Auto),
            "pipelined" => Ok(ModeRequest::Pipelined),
            "folded" => Ok(ModeRequest::Folded),
            other => Err(format!("unknown mode '{other}' (auto|pipelined|folded)")),
        }
    }
}

impl fmt::Display for ModeRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModeRequest::Auto => "auto",
            ModeRequest::Pipelined => "pipelined",
            ModeRequest::Folded => "folded",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("{mode} mode does not fit: needs {needed_bits} BRAM bits, device has {available_bits}")]
    OverrideInfeasible { mode: Mode, needed_bits: u64, available_bits: u64 },
    #[error("{op} requires pipelined mode, plan is {mode}")]
    ModeMismatch { op: String, mode: Mode },
    #[error("no feasible factor for loop '{var}' of kernel '{kernel}': {resource} over budget even at f=1")]
    NoFeasibleFactor { kernel: String, var: String, resource: String },
    #[error("planner produced an invalid plan: {0:?}")]
    Invalid(Vec<String>),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Xform(#[from] XformError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// One kernel launch (or, for pipelined plans, one running kernel).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Invocation {
    pub kernel: String,
    pub layer: String,
    pub bindings: Bindings,
    /// Formal Global buffer → global tensor.
    pub buffers: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionPlan {
    pub network: String,
    pub mode: Mode,
    pub kernels: Vec<KernelIR>,
    pub invocations: Vec<Invocation>,
    pub channels: Vec<ChannelDecl>,
    /// Kernel id → command queue. Autorun kernels have no queue.
    pub queues: BTreeMap<String, usize>,
    pub factors: Vec<FactorChoice>,
    pub of_enabled: bool,
    pub input_tensor: String,
    pub output_tensor: String,
    pub decision: Option<ModeDecision>,
}

/// Table order of optimization abbreviations.
pub const OPTIMIZATIONS: [&str; 9] = ["PK", "LU", "LT", "LF", "CW", "OF", "CH", "AR", "CE"];

impl ExecutionPlan {
    pub fn empty(network: &str, mode: Mode) -> Self {
        ExecutionPlan {
            network: network.to_string(),
            mode,
            kernels: Vec::new(),
            invocations: Vec::new(),
            channels: Vec::new(),
            queues: BTreeMap::new(),
            factors: Vec::new(),
            of_enabled: false,
            input_tensor: format!("act:{INPUT_ID}"),
            output_tensor: format!("act:{INPUT_ID}"),
            decision: None,
        }
    }

    pub fn kernel(&self, id: &str) -> Option<&KernelIR> {
        self.kernels.iter().find(|k| k.id == id)
    }

    pub fn kernel_mut(&mut self, id: &str) -> Option<&mut KernelIR> {
        self.kernels.iter_mut().find(|k| k.id == id)
    }

    /// Number of distinct command queues.
    pub fn queue_count(&self) -> usize {
        self.queues.values().collect::<BTreeSet<_>>().len()
    }

    /// Optimizations present in the plan, in table order.
    pub fn optimizations(&self) -> Vec<&'static str> {
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for k in &self.kernels {
            for s in &k.history {
                seen.insert(s.abbrev());
            }
        }
        if self.of_enabled {
            seen.insert("OF");
        }
        if !self.channels.is_empty() {
            seen.insert("CH");
        }
        if self.kernels.iter().any(|k| k.autorun) {
            seen.insert("AR");
        }
        if self.mode == Mode::Pipelined && self.queue_count() > 1 {
            seen.insert("CE");
        }
        OPTIMIZATIONS.iter().copied().filter(|o| seen.contains(o)).collect()
    }

    /// Shape of every Global tensor the invocations touch.
    pub fn global_tensors(&self) -> Result<BTreeMap<String, Vec<usize>>, IrError> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for inv in &self.invocations {
            let k = self
                .kernel(&inv.kernel)
                .ok_or_else(|| IrError::InvalidPlan(vec![format!("unknown kernel '{}'", inv.kernel)]))?;
            let env = k.resolve_env(&inv.bindings)?;
            for b in k.buffers.iter().filter(|b| b.space == MemSpace::Global) {
                let name = inv.buffers.get(&b.name).ok_or_else(|| {
                    IrError::InvalidPlan(vec![format!("'{}' unmapped for layer '{}'", b.name, inv.layer)])
                })?;
                let shape = b.shape.iter().map(|d| d.resolve(&env)).collect::<Result<Vec<_>, _>>()?;
                if let Some(prev) = out.get(name) {
                    if prev.iter().product::<usize>() != shape.iter().product::<usize>() {
                        return Err(IrError::InvalidPlan(vec![format!(
                            "tensor '{name}' used with shapes {prev:?} and {shape:?}"
                        )]));
                    }
                    continue;
                }
                out.insert(name.clone(), shape);
            }
        }
        Ok(out)
    }

    /// Deterministic parameters for every `w:*` tensor, drawn from `seed`.
    pub fn synth_weights(&self, seed: u64) -> Result<BTreeMap<String, Tensor>, IrError> {
        Ok(self
            .global_tensors()?
            .into_iter()
            .filter(|(n, _)| n.starts_with("w:"))
            .map(|(n, s)| {
                let t = synth_tensor(seed, &n, &s, TensorRole::from_name(&n, &s));
                (n, t)
            })
            .collect())
    }

    fn validate(&self) -> Result<(), PlanError> {
        let v = structural_check(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(PlanError::Invalid(v.iter().map(|v| v.to_string()).collect()))
        }
    }
}

/// Pipelined: one queue per non-autorun kernel. Folded: one shared queue.
pub fn assign_queues(plan: &mut ExecutionPlan) {
    plan.queues.clear();
    match plan.mode {
        Mode::Pipelined => {
            for (q, k) in plan.kernels.iter().filter(|k| !k.autorun).enumerate() {
                plan.queues.insert(k.id.clone(), q);
            }
        }
        Mode::Folded => {
            for k in &plan.kernels {
                plan.queues.insert(k.id.clone(), 0);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanOptions {
    pub mode: ModeRequest,
    /// Relaxed float ordering (`-fp-relaxed -fpc`).
    pub of_enabled: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions { mode: ModeRequest::Auto, of_enabled: true }
    }
}

pub(crate) fn invocation_for(k: &KernelIR) -> Invocation {
    let o = k.origin.as_ref().expect("lowered kernels carry an origin");
    let globals: BTreeSet<&str> =
        k.buffers.iter().filter(|b| b.space == MemSpace::Global).map(|b| b.name.as_str()).collect();
    Invocation {
        kernel: k.id.clone(),
        layer: o.layer.id.clone(),
        bindings: Bindings::new(),
        buffers: o
            .buffer_map
            .iter()
            .filter(|(f, _)| globals.contains(f.as_str()))
            .map(|(f, t)| (f.clone(), t.clone()))
            .collect(),
    }
}

/// Full optimized plan for `graph` on `device`.
pub fn build_plan(
    graph: &NetworkGraph,
    device: &DeviceProfile,
    opts: PlanOptions,
) -> Result<ExecutionPlan, PlanError> {
    let decision = select_mode(graph, device, opts.mode)?;
    let stages = lower_stages(graph)?;
    let stages = fuse_stages(graph, stages)?;
    let stages = cache_stages(stages);
    let mut plan = ExecutionPlan::empty(&graph.name, decision.selected);
    plan.of_enabled = opts.of_enabled;
    plan.output_tensor = format!("act:{}", graph.output_id());
    match decision.selected {
        Mode::Folded => {
            let (kernels, invocations) = parameterize_stages(stages)?;
            plan.kernels = kernels;
            plan.invocations = invocations;
        }
        Mode::Pipelined => {
            plan.invocations = stages.iter().map(invocation_for).collect();
            plan.kernels = stages;
            channelize(&mut plan)?;
            mark_autorun(&mut plan)?;
        }
    }
    choose_factors(&mut plan, device)?;
    assign_queues(&mut plan);
    plan.decision = Some(decision);
    plan.validate()?;
    Ok(plan)
}

/// The unoptimized folded plan: one naive kernel per layer, run in
/// topological order through global memory, strict float ordering.
pub fn reference_plan(graph: &NetworkGraph) -> Result<ExecutionPlan, PlanError> {
    let mut plan = ExecutionPlan::empty(&graph.name, Mode::Folded);
    plan.output_tensor = format!("act:{}", graph.output_id());
    for layer in &graph.layers {
        let k = lower_layer(layer, &graph.input_shapes(layer))?;
        plan.invocations.push(invocation_for(&k));
        plan.kernels.push(k);
    }
    assign_queues(&mut plan);
    plan.validate()?;
    Ok(plan)
}

/// Document form of a plan: everything but the loop nests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanDump {
    pub network: String,
    pub mode: Mode,
    pub optimizations: Vec<&'static str>,
    pub kernels: Vec<KernelDump>,
    pub invocations: Vec<Invocation>,
    pub channels: Vec<ChannelDump>,
    pub queues: BTreeMap<String, usize>,
    pub factors: Vec<FactorChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelDump {
    pub id: String,
    pub params: Vec<String>,
    pub autorun: bool,
    pub layers: Vec<String>,
    pub schedule: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelDump {
    pub name: String,
    pub depth: usize,
    pub depth_bytes: usize,
    pub producer: String,
    pub consumer: String,
}

impl PlanDump {
    pub fn new(plan: &ExecutionPlan) -> Self {
        PlanDump {
            network: plan.network.clone(),
            mode: plan.mode,
            optimizations: plan.optimizations(),
            kernels: plan
                .kernels
                .iter()
                .map(|k| KernelDump {
                    id: k.id.clone(),
                    params: k.params.clone(),
                    autorun: k.autorun,
                    layers: plan
                        .invocations
                        .iter()
                        .filter(|i| i.kernel == k.id)
                        .map(|i| i.layer.clone())
                        .collect(),
                    schedule: k.history.iter().map(XformStep::to_string).collect(),
                })
                .collect(),
            invocations: plan.invocations.clone(),
            channels: plan
                .channels
                .iter()
                .map(|c| ChannelDump {
                    name: c.name.clone(),
                    depth: c.depth,
                    depth_bytes: c.depth * crate::costmodel::ELEM_BYTES,
                    producer: c.producer.clone(),
                    consumer: c.consumer.clone(),
                })
                .collect(),
            queues: plan.queues.clone(),
            factors: plan.factors.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundled;
    use crate::loopir::{compare_tensors, interpret_plan, synth_input, DEFAULT_MAX_STEPS};
    use crate::netdef::Shape;

    fn lenet() -> ExecutionPlan {
        build_plan(&bundled::lenet5(), &bundled::s10sx(), PlanOptions::default()).unwrap()
    }

    #[test]
    fn lenet_is_pipelined_with_channels() {
        let p = lenet();
        assert_eq!(p.mode, Mode::Pipelined);
        let ids: Vec<&str> = p.kernels.iter().map(|k| k.id.as_str()).collect();
        assert_eq!(ids, ["conv1", "pool1", "conv2", "pool2", "flatten", "fc1", "fc2"]);
        assert_eq!(p.channels.len(), 6);
        assert_eq!(channel_depths(&p)["ch_conv2_to_pool2"], 256);
        let auto: Vec<&str> = p.kernels.iter().filter(|k| k.autorun).map(|k| k.id.as_str()).collect();
        assert_eq!(auto, ["pool1", "pool2", "flatten"]);
        assert_eq!(p.queue_count(), 4);
        assert_eq!(p.optimizations(), ["LU", "LF", "CW", "OF", "CH", "AR", "CE"]);
    }

    #[test]
    fn large_nets_fold() {
        let dev = bundled::s10sx();
        for g in [bundled::mobilenet_v1(), bundled::resnet34()] {
            let p = build_plan(&g, &dev, PlanOptions::default()).unwrap();
            assert_eq!(p.mode, Mode::Folded);
            assert!(p.channels.is_empty());
            assert_eq!(p.queue_count(), 1);
            assert_eq!(p.optimizations(), ["PK", "LU", "LT", "LF", "CW", "OF"]);
        }
    }

    #[test]
    fn forced_pipelined_refused_when_too_big() {
        let err = build_plan(
            &bundled::mobilenet_v1(),
            &bundled::s10sx(),
            PlanOptions { mode: ModeRequest::Pipelined, of_enabled: true },
        )
        .unwrap_err();
        assert!(matches!(err, PlanError::OverrideInfeasible { mode: Mode::Pipelined, .. }), "{err}");
    }

    #[test]
    fn pipelined_only_passes_reject_folded_plans() {
        let mut p = ExecutionPlan::empty("x", Mode::Folded);
        assert_eq!(
            channelize(&mut p).unwrap_err(),
            PlanError::ModeMismatch { op: "channelize".into(), mode: Mode::Folded }
        );
        assert!(matches!(mark_autorun(&mut p), Err(PlanError::ModeMismatch { .. })));
    }

    #[test]
    fn forced_folded_lenet_matches_reference() {
        let g = bundled::lenet5();
        let r = reference_plan(&g).unwrap();
        let w = r.synth_weights(1).unwrap();
        let x = synth_input(1, &g.input_shape.dims());
        let want = interpret_plan(&r, &x, &w, DEFAULT_MAX_STEPS).unwrap();
        for (mode, of) in [(ModeRequest::Folded, false), (ModeRequest::Pipelined, false)] {
            let p = build_plan(&g, &bundled::s10sx(), PlanOptions { mode, of_enabled: of }).unwrap();
            let got = interpret_plan(&p, &x, &w, DEFAULT_MAX_STEPS).unwrap();
            assert_eq!(got.output, want.output, "{mode}");
            assert_eq!(got.stats.flops(), want.stats.flops());
        }
    }

    #[test]
    fn reduced_mobilenet_folded_matches_reference() {
        let g = bundled::mobilenet_v1().with_input_shape(Shape::new(3, 32, 32)).unwrap();
        let p = build_plan(&g, &bundled::s10sx(), PlanOptions { mode: ModeRequest::Folded, of_enabled: true }).unwrap();
        let r = reference_plan(&g).unwrap();
        let w = r.synth_weights(3).unwrap();
        let x = synth_input(3, &g.input_shape.dims());
        let want = interpret_plan(&r, &x, &w, DEFAULT_MAX_STEPS).unwrap();
        let got = interpret_plan(&p, &x, &w, DEFAULT_MAX_STEPS).unwrap();
        assert!(compare_tensors(&got.output, &want.output).unwrap() <= 1e-4);
    }

    #[test]
    fn dump_lists_groups_and_depth_bytes() {
        let d = PlanDump::new(&lenet());
        let c = d.channels.iter().find(|c| c.name == "ch_conv2_to_pool2").unwrap();
        assert_eq!(c.depth_bytes, 1024);
        let m = build_plan(&bundled::mobilenet_v1(), &bundled::s10sx(), PlanOptions::default()).unwrap();
        let d = PlanDump::new(&m);
        let pw = d.kernels.iter().find(|k| k.id == "conv2d_1x1_s1_batchnorm_relu6").unwrap();
        assert_eq!(pw.layers.len(), 13);
        assert_eq!(pw.params, ["F", "C", "H", "W"]);
    }
}
