use std::collections::BTreeMap;

use super::{cache_writes, fuse_postop, strip_mine_symbolic, tile_symbolic, unroll_full};
use super::{XformError, XformStep};
use crate::loopir::{layer_params, lower_layer, lower_layer_symbolic, specialize, Bindings, KernelIR};
use crate::netdef::{layer_output, GroupKey};

/// One layer served by a parameterized kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInvocation {
    pub layer: String,
    pub bindings: Bindings,
    /// Formal buffer → global tensor.
    pub buffers: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub kernel: KernelIR,
    pub invocations: Vec<ParamInvocation>,
}

/// Replays a concrete kernel's schedule on its symbolic lowering.
fn replay(template: &KernelIR, all: &[Bindings]) -> Result<KernelIR, XformError> {
    let o = template.origin.as_ref().expect("checked by caller");
    let mut k = lower_layer_symbolic(&o.layer, &o.input_shapes)?;
    let mut shape = layer_output(&o.layer, &o.input_shapes).map_err(|e| {
        XformError::NotApplicable(format!("'{}': {e}", template.id))
    })?;
    for step in &template.history {
        k = match step {
            XformStep::FusePostOp { post } => {
                let layer = o.posts.iter().find(|p| &p.id == post).ok_or_else(|| {
                    XformError::NotApplicable(format!("post-op '{post}' missing from origin"))
                })?;
                let pk = lower_layer(layer, &[shape])?;
                shape = layer_output(layer, &[shape])
                    .map_err(|e| XformError::NotApplicable(e.to_string()))?;
                fuse_postop(&k, &pk)?
            }
            XformStep::CacheWrites { buffer } => cache_writes(&k, buffer)?,
            XformStep::UnrollFull { var } => unroll_full(&k, var)?,
            XformStep::StripMine { var, factor } => strip_mine_symbolic(&k, var, *factor, all)?,
            XformStep::Tile { loops, factors } => tile_symbolic(&k, loops, factors, all)?,
            XformStep::Parameterize { .. } => {
                return Err(XformError::NotApplicable(format!("'{}' is already parameterized", template.id)))
            }
        };
    }
    Ok(k)
}

/// Merges kernels of one group key into a single kernel over symbolic
/// dimensions, plus the per-layer bindings that recover each member.
/// Members must carry identical schedules; any structural difference
/// surfaces as `StructuralDivergence`.
pub fn parameterize_group(kernels: &[KernelIR], key: &GroupKey) -> Result<ParamGroup, XformError> {
    let Some(template) = kernels.first() else {
        return Err(XformError::NotApplicable("empty group".into()));
    };
    let mut invocations = Vec::new();
    for k in kernels {
        let o = k.origin.as_ref().ok_or_else(|| {
            XformError::NotApplicable(format!("'{}' has no layer origin", k.id))
        })?;
        let found = o.layer.group_key();
        if &found != key {
            return Err(XformError::KeyMismatch {
                kernel: k.id.clone(),
                expected: key.to_string(),
                found: found.to_string(),
            });
        }
        if k.is_parameterized() {
            return Err(XformError::NotApplicable(format!("'{}' is already parameterized", k.id)));
        }
        invocations.push(ParamInvocation {
            layer: o.layer.id.clone(),
            bindings: layer_params(&o.layer, &o.input_shapes),
            buffers: o.buffer_map.clone(),
        });
    }
    let all: Vec<Bindings> = invocations.iter().map(|i| i.bindings.clone()).collect();
    let mut sym = replay(template, &all)?;
    for (k, inv) in kernels.iter().zip(&invocations) {
        let diverge = |detail: String| XformError::StructuralDivergence { kernel: k.id.clone(), detail };
        let spec = specialize(&sym, &inv.bindings).map_err(|e| diverge(e.to_string()))?;
        if spec.buffers != k.buffers {
            return Err(diverge("buffer declarations differ".into()));
        }
        if spec.body != k.body {
            return Err(diverge("loop nest differs".into()));
        }
    }
    sym.id = key.to_string();
    sym.history.push(XformStep::Parameterize { key: key.to_string() });
    Ok(ParamGroup { kernel: sym, invocations })
}
