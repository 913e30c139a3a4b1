use serde::Serialize;

use super::{ExecutionPlan, Mode, PlanError};
use crate::costmodel::{bandwidth_cap_factor, estimate_resources, fits, DeviceProfile, ELEM_BYTES};
use crate::loopir::{Bindings, BufAccess, Dim, KernelIR, LoopNode, MemSpace};
use crate::netdef::LayerKind;
use crate::xform::{strip_mine_symbolic, tile_symbolic, unroll_full, XformError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OptKind {
    LU,
    LT,
}

/// Why a larger factor was not taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Limit {
    Bandwidth,
    Divisibility,
    Resources,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorChoice {
    pub kernel: String,
    #[serde(rename = "loop")]
    pub loop_var: String,
    pub opt: OptKind,
    /// Extent of the loop under each invocation.
    pub extents: Vec<usize>,
    pub candidates: Vec<usize>,
    pub chosen: usize,
    pub limit: Limit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TuneTarget {
    pub var: String,
    pub opt: OptKind,
}

/// Loops of `k` whose factor the planner picks, in tuning order.
pub fn tunable_loops(k: &KernelIR, mode: Mode) -> Vec<TuneTarget> {
    let Some(o) = &k.origin else { return Vec::new() };
    use OptKind::*;
    let spec: &[(&str, OptKind)] = match (o.layer.kind(), mode) {
        (LayerKind::Conv2d, Mode::Pipelined) => &[("kx", LU), ("ky", LU), ("ic", LU)],
        (LayerKind::Conv2d, Mode::Folded) => &[("kx", LU), ("ky", LU), ("ic", LT), ("f", LT)],
        (LayerKind::DepthwiseConv2d, Mode::Pipelined) => &[("kx", LU), ("ky", LU)],
        (LayerKind::DepthwiseConv2d, Mode::Folded) => &[("kx", LU), ("ky", LU), ("c", LT)],
        (LayerKind::Dense, Mode::Pipelined) => &[("i", LU)],
        (LayerKind::Dense, Mode::Folded) => &[("i", LT), ("o", LT)],
        (LayerKind::Maxpool | LayerKind::Avgpool, _) => &[("kx", LU), ("ky", LU)],
        (k, _) if k.is_post_op() || k == LayerKind::Add => &[("x", LU)],
        _ => &[],
    };
    spec.iter()
        .filter(|(v, _)| k.find_loop(v).is_some())
        .map(|(v, opt)| TuneTarget { var: v.to_string(), opt: *opt })
        .collect()
}

fn divisors_common(extents: &[usize]) -> Vec<usize> {
    let g = extents.iter().fold(0usize, |a, &b| gcd(a, b)).max(1);
    (1..=g).filter(|d| g % d == 0).collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Rebuilds `base` with the chosen factors. LU loops are unrolled fully or
/// strip-mined one at a time; LT loops go through a single tile.
fn apply(base: &KernelIR, chosen: &[(TuneTarget, usize)], bindings: &[Bindings]) -> Result<KernelIR, XformError> {
    let mut k = base.clone();
    let mut tiles: (Vec<String>, Vec<usize>) = (Vec::new(), Vec::new());
    for (t, f) in chosen.iter().filter(|(_, f)| *f > 1) {
        match t.opt {
            OptKind::LU => {
                let whole = matches!(k.find_loop(&t.var).map(|l| &l.extent), Some(Dim::Const(e)) if e == f);
                k = if whole { unroll_full(&k, &t.var)? } else { strip_mine_symbolic(&k, &t.var, *f, bindings)? };
            }
            OptKind::LT => {
                tiles.0.push(t.var.clone());
                tiles.1.push(*f);
            }
        }
    }
    if !tiles.0.is_empty() {
        k = tile_symbolic(&k, &tiles.0, &tiles.1, bindings)?;
    }
    Ok(k)
}

/// Widest Global access: the product of unrolled extents an access spans.
fn max_global_lanes(k: &KernelIR) -> usize {
    let mut worst = 1;
    k.visit_stmts(&mut |s, loops| {
        let mut sites: Vec<&BufAccess> = s.reads();
        sites.extend(s.writes());
        for a in sites {
            if k.buffer(&a.buffer).is_some_and(|b| b.space == MemSpace::Global) {
                let lanes: usize = loops
                    .iter()
                    .filter(|l: &&&LoopNode| l.unroll_full && a.uses_var(&l.var))
                    .map(|l| l.extent.as_const().unwrap_or(1))
                    .product();
                worst = worst.max(lanes);
            }
        }
    });
    worst
}

/// Picks unroll and tile factors kernel by kernel, loop by loop: the
/// largest common divisor of the loop's extents whose Global accesses stay
/// under the bandwidth cap and whose whole plan still fits the device.
pub fn choose_factors(plan: &mut ExecutionPlan, device: &DeviceProfile) -> Result<(), PlanError> {
    let cap = bandwidth_cap_factor(device, ELEM_BYTES).max(1);
    plan.factors.clear();
    for ki in 0..plan.kernels.len() {
        let base = plan.kernels[ki].clone();
        let bindings: Vec<Bindings> = plan
            .invocations
            .iter()
            .filter(|i| i.kernel == base.id)
            .map(|i| i.bindings.clone())
            .collect();
        let mut chosen: Vec<(TuneTarget, usize)> = Vec::new();
        for t in tunable_loops(&base, plan.mode) {
            let l = base.find_loop(&t.var).expect("tunable loops exist");
            let mut extents = Vec::new();
            for b in &bindings {
                let env = base.resolve_env(b)?;
                extents.push(l.extent.resolve(&env)?);
            }
            let candidates = divisors_common(&extents);
            let mut limit = Limit::Divisibility;
            let mut pick = None;
            for &f in candidates.iter().rev() {
                let mut trial = chosen.clone();
                trial.push((t.clone(), f));
                let k = apply(&base, &trial, &bindings)?;
                if max_global_lanes(&k) > cap {
                    limit = Limit::Bandwidth;
                    continue;
                }
                plan.kernels[ki] = k.clone();
                let fit = fits(&estimate_resources(plan, device), device);
                if !fit.fits {
                    if f == 1 {
                        return Err(PlanError::NoFeasibleFactor {
                            kernel: base.id.clone(),
                            var: t.var.clone(),
                            resource: fit.limiting().unwrap_or("resources").to_string(),
                        });
                    }
                    limit = Limit::Resources;
                    continue;
                }
                pick = Some(f);
                break;
            }
            let f = pick.expect("f = 1 always passes the bandwidth check");
            if f == *candidates.last().expect("1 is a candidate") {
                limit = Limit::Divisibility;
            }
            chosen.push((t.clone(), f));
            plan.factors.push(FactorChoice {
                kernel: base.id.clone(),
                loop_var: t.var.clone(),
                opt: t.opt,
                extents,
                candidates,
                chosen: f,
                limit,
            });
        }
        plan.kernels[ki] = apply(&base, &chosen, &bindings)?;
    }
    Ok(())
}
