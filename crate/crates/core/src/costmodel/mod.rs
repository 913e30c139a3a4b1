//! Device profiles and analytical estimates: bandwidth cap, LSU inventory,
//! DSP/BRAM/logic usage and plan throughput.

mod device;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::loopir::{
    AffineExpr, Bindings, BufAccess, Dim, IrError, KernelIR, LoopNode, MemSpace, Node,
};
use crate::plan::{ExecutionPlan, Mode};

pub use device::{bandwidth_cap_factor, Calibration, DeviceProfile, DEVICE_FORMAT_VERSION};

/// Every tensor element is an f32.
pub const ELEM_BYTES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("device profile: {0}")]
    Profile(String),
    #[error("plan has no kernels")]
    EmptyPlan,
    #[error(transparent)]
    Ir(#[from] IrError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LsuKind {
    Coalesced,
    Replicated,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct LsuInstance {
    pub kernel: String,
    pub buffer: String,
    pub kind: LsuKind,
    pub width_bytes: usize,
    pub replication: usize,
    pub write: bool,
}

/// Flat-address stride of `var` in an access to a buffer of `shape`, when
/// every dimension it crosses is constant.
fn flat_stride(index: &[AffineExpr], shape: &[Dim], var: &str) -> Option<i64> {
    let mut stride = 0i64;
    for (d, e) in index.iter().enumerate() {
        let c = e.coeff(var);
        if c == 0 {
            continue;
        }
        let mut inner = 1i64;
        for dim in &shape[d + 1..] {
            inner *= dim.as_const()? as i64;
        }
        stride += c * inner;
    }
    Some(stride)
}

/// Enclosing unrolled loops (outermost first) whose variable the access uses.
fn lanes<'a>(a: &BufAccess, loops: &[&'a LoopNode]) -> Vec<&'a LoopNode> {
    loops.iter().copied().filter(|l| l.unroll_full && a.uses_var(&l.var)).collect()
}

fn extent_product(loops: &[&LoopNode]) -> usize {
    loops.iter().map(|l| l.extent.as_const().expect("unrolled loops are constant")).product()
}

/// One LSU per distinct Global access site (buffer, index, direction). A
/// site whose innermost unrolled variable has unit stride gets one
/// coalesced LSU `f` elements wide; any other unrolled site is replicated
/// `f` times.
pub fn estimate_lsus(k: &KernelIR) -> Vec<LsuInstance> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    k.visit_stmts(&mut |s, loops| {
        let mut sites: Vec<(&BufAccess, bool)> = s.reads().into_iter().map(|a| (a, false)).collect();
        if let Some(w) = s.writes() {
            sites.push((w, true));
        }
        for (a, write) in sites {
            let Some(decl) = k.buffer(&a.buffer) else { continue };
            if decl.space != MemSpace::Global {
                continue;
            }
            let u = lanes(a, loops);
            let f = extent_product(&u);
            let key = (a.buffer.clone(), a.index.iter().map(|e| e.to_string()).collect::<Vec<_>>(), write, f);
            if !seen.insert(key) {
                continue;
            }
            let unit = u.last().is_none_or(|l| flat_stride(&a.index, &decl.shape, &l.var) == Some(1));
            let (kind, width, replication) = if unit {
                (LsuKind::Coalesced, f * ELEM_BYTES, 1)
            } else {
                (LsuKind::Replicated, ELEM_BYTES, f)
            };
            out.push(LsuInstance {
                kernel: k.id.clone(),
                buffer: a.buffer.clone(),
                kind,
                width_bytes: width,
                replication,
                write,
            });
        }
    });
    out
}

/// MAC lanes: each `Mac` statement times the extents of its enclosing
/// unrolled loops.
pub fn mac_lanes(k: &KernelIR) -> u64 {
    let mut n = 0u64;
    k.visit_stmts(&mut |s, loops| {
        if s.is_mac() {
            let unrolled: Vec<&LoopNode> = loops.iter().copied().filter(|l| l.unroll_full).collect();
            n += extent_product(&unrolled) as u64;
        }
    });
    n
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelResources {
    pub kernel: String,
    pub dsps: u64,
    pub bram_bits: u64,
    pub aluts: u64,
    pub local_bits: u64,
    pub lsu_count: u64,
    pub lsus: Vec<LsuInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResourceEstimate {
    pub dsps: u64,
    pub bram_bits: u64,
    pub aluts: u64,
    /// FIFO storage for channels, included in `bram_bits`.
    pub channel_bram_bits: u64,
    pub lsus: Vec<LsuInstance>,
    pub per_kernel: Vec<KernelResources>,
}

pub fn estimate_kernel_resources(k: &KernelIR, device: &DeviceProfile) -> KernelResources {
    let cal = &device.calibration;
    let lsus = estimate_lsus(k);
    let lsu_count: u64 = lsus.iter().map(|l| l.replication as u64).sum();

    // Concurrent read lanes per Local buffer.
    let mut readers: BTreeMap<&str, u64> = BTreeMap::new();
    k.visit_stmts(&mut |s, loops| {
        for a in s.reads() {
            *readers.entry(a.buffer.as_str()).or_default() += extent_product(&lanes(a, loops)) as u64;
        }
    });
    let mut local_bits = 0u64;
    for b in k.buffers.iter().filter(|b| b.space == MemSpace::Local) {
        let elems = b.const_elems().unwrap_or(0) as u64;
        let r = readers.get(b.name.as_str()).copied().unwrap_or(0);
        let ports = r.div_ceil(2).max(1);
        local_bits += elems * 32 * ports;
    }
    let mut loops = 0u64;
    k.visit_loops(&mut |_, _| loops += 1);
    KernelResources {
        kernel: k.id.clone(),
        dsps: mac_lanes(k),
        bram_bits: local_bits + lsu_count * cal.bram_blocks_per_lsu * cal.bram_block_bits,
        aluts: cal.alut_kernel_base + loops * cal.alut_per_loop + lsu_count * cal.alut_per_lsu,
        local_bits,
        lsu_count,
        lsus,
    }
}

pub fn estimate_resources(plan: &ExecutionPlan, device: &DeviceProfile) -> ResourceEstimate {
    let per_kernel: Vec<KernelResources> =
        plan.kernels.iter().map(|k| estimate_kernel_resources(k, device)).collect();
    let channel_bram_bits: u64 = plan.channels.iter().map(|c| c.depth as u64 * 32).sum();
    ResourceEstimate {
        dsps: per_kernel.iter().map(|k| k.dsps).sum(),
        bram_bits: per_kernel.iter().map(|k| k.bram_bits).sum::<u64>() + channel_bram_bits,
        aluts: per_kernel.iter().map(|k| k.aluts).sum(),
        channel_bram_bits,
        lsus: per_kernel.iter().flat_map(|k| k.lsus.iter().cloned()).collect(),
        per_kernel,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub fits: bool,
    /// Budget minus estimate, per resource.
    pub margins: BTreeMap<String, i64>,
}

impl FitReport {
    /// First resource over budget, if any.
    pub fn limiting(&self) -> Option<&str> {
        self.margins.iter().find(|(_, &m)| m < 0).map(|(k, _)| k.as_str())
    }
}

pub fn fits(est: &ResourceEstimate, device: &DeviceProfile) -> FitReport {
    let margins: BTreeMap<String, i64> = [
        ("aluts", device.aluts, est.aluts),
        ("bram_bits", device.bram_bits, est.bram_bits),
        ("dsps", device.dsps, est.dsps),
    ]
    .into_iter()
    .map(|(n, budget, used)| (n.to_string(), budget as i64 - used as i64))
    .collect();
    FitReport { fits: margins.values().all(|&m| m >= 0), margins }
}

fn node_cycles(nodes: &[Node], env: &Bindings) -> Result<u64, IrError> {
    let mut loops = 0u64;
    let mut stmts = false;
    for n in nodes {
        match n {
            Node::Stmt(_) => stmts = true,
            Node::Loop(l) => {
                let body = node_cycles(&l.body, env)?;
                let trips = if l.unroll_full { 1 } else { l.extent.resolve(env)? as u64 };
                loops += trips * body;
            }
        }
    }
    Ok(loops.max(stmts as u64))
}

/// Pipelined trip count of a kernel: the product of non-unrolled extents
/// along each nest, summed over sequential nests. Excludes pipeline fill.
pub fn kernel_cycles(k: &KernelIR, bindings: &Bindings) -> Result<u64, IrError> {
    let env = k.resolve_env(bindings)?;
    node_cycles(&k.body, &env)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvocationCycles {
    pub kernel: String,
    pub layer: String,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputEstimate {
    /// Cycles per kernel including pipeline fill, summed over a kernel's
    /// invocations.
    pub per_kernel: BTreeMap<String, u64>,
    pub per_invocation: Vec<InvocationCycles>,
    pub plan_cycles: u64,
    pub fps: f64,
}

pub fn estimate_throughput(plan: &ExecutionPlan, device: &DeviceProfile) -> Result<ThroughputEstimate, CostError> {
    if plan.kernels.is_empty() {
        return Err(CostError::EmptyPlan);
    }
    let cal = &device.calibration;
    let mut per_kernel: BTreeMap<String, u64> = BTreeMap::new();
    let mut per_invocation = Vec::new();
    for inv in &plan.invocations {
        let k = plan.kernel(&inv.kernel).ok_or_else(|| IrError::InvalidPlan(vec![inv.kernel.clone()]))?;
        let cycles = kernel_cycles(k, &inv.bindings)? + cal.pipeline_fill_cycles;
        *per_kernel.entry(k.id.clone()).or_default() += cycles;
        per_invocation.push(InvocationCycles { kernel: k.id.clone(), layer: inv.layer.clone(), cycles });
    }
    let plan_cycles = match plan.mode {
        Mode::Pipelined => per_invocation.iter().map(|c| c.cycles).max().unwrap_or(0),
        Mode::Folded => per_invocation.iter().map(|c| c.cycles + cal.launch_overhead_cycles).sum(),
    };
    Ok(ThroughputEstimate {
        per_kernel,
        per_invocation,
        plan_cycles,
        fps: device.assumed_clock_hz / plan_cycles.max(1) as f64,
    })
}

/// Physical LSUs of a kernel (replicas counted individually).
pub fn lsu_count(k: &KernelIR) -> usize {
    estimate_lsus(k).iter().map(|l| l.replication).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loopir::lower_layer;
    use crate::netdef::{LayerOp, LayerSpec, Padding, Shape};
    use crate::xform::{cache_writes, strip_mine, tile, unroll_full};

    fn conv(c: usize, f: usize) -> KernelIR {
        let l = LayerSpec::new(
            "conv",
            LayerOp::Conv2d { filters: f, kh: 3, kw: 3, stride: 1, padding: Padding::Same, bias: false },
            &["input"],
        );
        lower_layer(&l, &[Shape::new(c, 8, 8)]).unwrap()
    }

    #[test]
    fn tiled_mac_lanes_multiply() {
        let k = cache_writes(&conv(64, 64), "output").unwrap();
        let t = tile(&k, &["f".into(), "ic".into()], &[8, 8]).unwrap();
        assert_eq!(mac_lanes(&t), 64);
        assert_eq!(mac_lanes(&k), 1);
    }

    #[test]
    fn cached_writes_drop_a_store_site() {
        let k = conv(4, 4);
        let out = |k: &KernelIR| estimate_lsus(k).iter().filter(|l| l.buffer == "output").count();
        assert_eq!(out(&k), 2);
        assert_eq!(out(&cache_writes(&k, "output").unwrap()), 1);
    }

    #[test]
    fn unit_stride_coalesces_and_strided_replicates() {
        let d = LayerSpec::new("fc", LayerOp::Dense { units: 16, bias: false }, &["input"]);
        let k = lower_layer(&d, &[Shape::new(64, 1, 1)]).unwrap();
        let i8 = strip_mine(&k, "i", 8).unwrap();
        let w = estimate_lsus(&i8).into_iter().find(|l| l.buffer == "weights").unwrap();
        assert_eq!((w.kind, w.width_bytes, w.replication), (LsuKind::Coalesced, 32, 1));
        let o8 = strip_mine(&k, "o", 8).unwrap();
        let w = estimate_lsus(&o8).into_iter().find(|l| l.buffer == "weights").unwrap();
        assert_eq!((w.kind, w.replication), (LsuKind::Replicated, 8));
    }

    #[test]
    fn local_only_kernel_has_no_lsus() {
        let mut k = lower_layer(&LayerSpec::new("r", LayerOp::Relu, &["input"]), &[Shape::new(2, 2, 2)])
            .unwrap();
        for b in &mut k.buffers {
            b.space = MemSpace::Local;
        }
        assert!(estimate_lsus(&k).is_empty());
    }

    #[test]
    fn unrolling_divides_cycles() {
        let k = conv(4, 4);
        let base = kernel_cycles(&k, &Bindings::new()).unwrap();
        assert_eq!(base, 4 * 8 * 8 * 4 * 3 * 3);
        let u = unroll_full(&k, "kx").unwrap();
        assert_eq!(kernel_cycles(&u, &Bindings::new()).unwrap() * 3, base);
        let s = strip_mine(&k, "ic", 2).unwrap();
        assert_eq!(kernel_cycles(&s, &Bindings::new()).unwrap() * 2, base);
    }

    #[test]
    fn fit_boundary_is_inclusive() {
        let d = DeviceProfile::s10sx();
        let mut est = ResourceEstimate {
            dsps: d.dsps,
            bram_bits: 0,
            aluts: 0,
            channel_bram_bits: 0,
            lsus: vec![],
            per_kernel: vec![],
        };
        assert!(fits(&est, &d).fits);
        est.bram_bits = d.bram_bits + 1;
        let r = fits(&est, &d);
        assert!(!r.fits);
        assert_eq!(r.margins["bram_bits"], -1);
        assert_eq!(r.limiting(), Some("bram_bits"));
        est.dsps = 6000;
        est.bram_bits = 0;
        assert!(!fits(&est, &d).fits);
    }
}
