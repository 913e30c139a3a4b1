use std::collections::BTreeSet;

use super::{Invocation, PlanError};
use crate::loopir::{lower_layer, KernelIR, MemSpace};
use crate::netdef::{GroupKey, LayerKind, LayerOp, NetworkGraph};
use crate::xform::{cache_writes, fuse_postop, parameterize_group, XformError, XformStep};

/// One naive kernel per layer, in topological order.
pub fn lower_stages(graph: &NetworkGraph) -> Result<Vec<KernelIR>, PlanError> {
    graph
        .layers
        .iter()
        .map(|l| lower_layer(l, &graph.input_shapes(l)).map_err(PlanError::from))
        .collect()
}

fn fusion_target(kind: LayerKind) -> bool {
    matches!(
        kind,
        LayerKind::Conv2d
            | LayerKind::DepthwiseConv2d
            | LayerKind::Dense
            | LayerKind::Maxpool
            | LayerKind::Avgpool
            | LayerKind::Add
    )
}

fn origin_kind(k: &KernelIR) -> LayerKind {
    k.origin.as_ref().expect("lowered kernel").layer.kind()
}

/// Folds relu/relu6/batchnorm stages into the conv, dense or pooling stage
/// that feeds them, when that stage has no other consumer.
pub fn fuse_stages(graph: &NetworkGraph, stages: Vec<KernelIR>) -> Result<Vec<KernelIR>, PlanError> {
    let mut out: Vec<KernelIR> = Vec::new();
    for s in stages {
        let layer = &s.origin.as_ref().expect("lowered kernel").layer;
        if layer.kind().is_post_op() && graph.consumers(&layer.inputs[0]).len() == 1 {
            let tensor = format!("act:{}", layer.inputs[0]);
            let producer = out.iter().position(|p| {
                p.origin.as_ref().and_then(|o| o.buffer_map.get("output")) == Some(&tensor)
            });
            if let Some(i) = producer.filter(|&i| fusion_target(origin_kind(&out[i]))) {
                match fuse_postop(&out[i], &s) {
                    Ok(f) => {
                        out[i] = f;
                        continue;
                    }
                    Err(XformError::FusionMismatch(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
        out.push(s);
    }
    Ok(out)
}

/// Moves every reduction accumulator into a register where the pattern
/// exists; other stages pass through.
pub fn cache_stages(stages: Vec<KernelIR>) -> Vec<KernelIR> {
    stages
        .into_iter()
        .map(|s| match cache_writes(&s, "output") {
            Ok(c) => c,
            Err(_) => s,
        })
        .collect()
}

/// Grouping signature: the layer op with its size parameter erased, plus
/// the fused post-ops and the schedule so far.
fn signature(k: &KernelIR) -> String {
    let o = k.origin.as_ref().expect("lowered kernel");
    let mut op = o.layer.op.clone();
    if let LayerOp::Conv2d { filters, .. } = &mut op {
        *filters = 0;
    }
    let posts: Vec<&str> = o.posts.iter().map(|p| p.kind().name()).collect();
    let steps: Vec<String> = k
        .history
        .iter()
        .map(|s| match s {
            XformStep::FusePostOp { .. } => "fuse".to_string(),
            s => s.to_string(),
        })
        .collect();
    format!("{op:?}|{posts:?}|{steps:?}")
}

fn group_name(key: &GroupKey, k: &KernelIR, taken: &BTreeSet<String>) -> String {
    let o = k.origin.as_ref().expect("lowered kernel");
    let mut name = key.to_string();
    for p in &o.posts {
        name.push('_');
        name.push_str(p.kind().name());
    }
    if !taken.contains(&name) {
        return name;
    }
    (2..).map(|i| format!("{name}_v{i}")).find(|n| !taken.contains(n)).expect("unbounded")
}

/// Folded mode: conv and depthwise stages sharing a signature become one
/// parameterized kernel; every other stage stays a per-layer kernel.
/// Invocations follow stage order.
pub fn parameterize_stages(stages: Vec<KernelIR>) -> Result<(Vec<KernelIR>, Vec<Invocation>), PlanError> {
    let groupable = |k: &KernelIR| matches!(origin_kind(k), LayerKind::Conv2d | LayerKind::DepthwiseConv2d);
    let mut order: Vec<String> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, s) in stages.iter().enumerate().filter(|(_, s)| groupable(s)) {
        let sig = signature(s);
        match order.iter().position(|o| *o == sig) {
            Some(g) => members[g].push(i),
            None => {
                order.push(sig);
                members.push(vec![i]);
            }
        }
    }
    let mut kernel_of: Vec<Option<(String, usize)>> = vec![None; stages.len()];
    let mut kernels = Vec::new();
    let mut param_invs = Vec::new();
    let mut taken: BTreeSet<String> = stages.iter().map(|s| s.id.clone()).collect();
    let mut placed: BTreeSet<usize> = BTreeSet::new();
    for (i, s) in stages.iter().enumerate() {
        if !groupable(s) {
            kernels.push(s.clone());
            continue;
        }
        let g = members.iter().position(|m| m.contains(&i)).expect("grouped");
        if !placed.insert(g) {
            continue;
        }
        let group: Vec<KernelIR> = members[g].iter().map(|&j| stages[j].clone()).collect();
        let key = s.origin.as_ref().expect("lowered kernel").layer.group_key();
        let mut pg = parameterize_group(&group, &key)?;
        let name = group_name(&key, s, &taken);
        taken.insert(name.clone());
        pg.kernel.id = name.clone();
        for (n, &j) in members[g].iter().enumerate() {
            kernel_of[j] = Some((name.clone(), param_invs.len() + n));
        }
        param_invs.extend(pg.invocations);
        kernels.push(pg.kernel);
    }
    let mut invocations = Vec::new();
    for (i, s) in stages.iter().enumerate() {
        match &kernel_of[i] {
            Some((name, p)) => {
                let pi = &param_invs[*p];
                let k = kernels.iter().find(|k| &k.id == name).expect("pushed");
                invocations.push(Invocation {
                    kernel: name.clone(),
                    layer: pi.layer.clone(),
                    bindings: pi.bindings.clone(),
                    buffers: pi
                        .buffers
                        .iter()
                        .filter(|(f, _)| k.buffer(f).is_some_and(|b| b.space == MemSpace::Global))
                        .map(|(f, t)| (f.clone(), t.clone()))
                        .collect(),
                });
            }
            None => invocations.push(super::invocation_for(s)),
        }
    }
    Ok((kernels, invocations))
}
