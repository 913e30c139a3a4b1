use std::collections::{BTreeMap, BTreeSet};

use super::{ExecutionPlan, Mode, PlanError};
use crate::loopir::{
    next_pow2, AffineExpr, BufAccess, BufferDecl, ChannelDecl, Dim, Expr, KernelIR, LoopNode,
    MemSpace, Node, Stmt, Access,
};

fn mismatch(op: &str, mode: Mode) -> PlanError {
    PlanError::ModeMismatch { op: op.to_string(), mode }
}

fn const_shape(b: &BufferDecl) -> Option<Vec<usize>> {
    b.shape.iter().map(Dim::as_const).collect()
}

/// True when the enclosing loops visit `index` over the whole buffer in
/// row-major order, one element per iteration.
fn is_linear_stream(index: &[AffineExpr], shape: &[usize], loops: &[&LoopNode]) -> bool {
    let mut flat = AffineExpr::constant(0);
    let mut stride = 1i64;
    for (e, &d) in index.iter().zip(shape).rev() {
        flat = flat + e.clone() * stride;
        stride *= d as i64;
    }
    let mut counter = AffineExpr::constant(0);
    let mut trips = 1i64;
    for l in loops.iter().rev() {
        let Some(e) = l.extent.as_const() else { return false };
        counter = counter + AffineExpr::var(&l.var) * trips;
        trips *= e as i64;
    }
    trips == stride && flat == counter
}

fn fresh(k: &KernelIR, base: &str) -> String {
    let taken: BTreeSet<String> = k
        .buffers
        .iter()
        .map(|b| b.name.clone())
        .chain(k.loop_vars())
        .chain(k.symbol_names())
        .collect();
    if !taken.contains(base) {
        return base.to_string();
    }
    (2..).map(|i| format!("{base}{i}")).find(|n| !taken.contains(n)).expect("unbounded")
}

/// A fresh loop nest over `shape` with body built from the index vars.
fn nest(k: &KernelIR, prefix: &str, shape: &[usize], leaf: impl FnOnce(Vec<AffineExpr>) -> Vec<Node>) -> Node {
    let vars: Vec<String> = (0..shape.len()).map(|d| fresh(k, &format!("{prefix}{d}"))).collect();
    let mut body = leaf(vars.iter().map(|v| AffineExpr::var(v)).collect());
    for (v, &e) in vars.iter().zip(shape).rev() {
        body = vec![Node::for_loop(v, Dim::Const(e), body)];
    }
    body.pop().expect("one nest")
}

struct Site {
    path: Vec<usize>,
    stream: bool,
}

/// Statements touching `buffer`: their paths and whether the only access
/// is one unguarded linear-stream access in the given direction.
fn sites(k: &KernelIR, buffer: &str, shape: &[usize], write: bool) -> Vec<Site> {
    fn go(
        nodes: &[Node],
        buffer: &str,
        shape: &[usize],
        write: bool,
        path: &mut Vec<usize>,
        loops: &mut Vec<LoopNode>,
        out: &mut Vec<Site>,
    ) {
        for (i, n) in nodes.iter().enumerate() {
            path.push(i);
            match n {
                Node::Loop(l) => {
                    loops.push(LoopNode { body: Vec::new(), ..l.clone() });
                    go(&l.body, buffer, shape, write, path, loops, out);
                    loops.pop();
                }
                Node::Stmt(s) => {
                    let reads: Vec<&BufAccess> = s.reads().into_iter().filter(|a| a.buffer == buffer).collect();
                    let w = s.writes().filter(|a| a.buffer == buffer);
                    if reads.is_empty() && w.is_none() {
                        path.pop();
                        continue;
                    }
                    let refs: Vec<&LoopNode> = loops.iter().collect();
                    let stream = match (write, w, reads.as_slice()) {
                        (true, Some(a), []) => {
                            matches!(s, Stmt::Store { .. })
                                && a.guard.is_none()
                                && is_linear_stream(&a.index, shape, &refs)
                        }
                        (false, None, [a]) => a.guard.is_none() && is_linear_stream(&a.index, shape, &refs),
                        _ => false,
                    };
                    out.push(Site { path: path.clone(), stream });
                }
            }
            path.pop();
        }
    }
    let mut out = Vec::new();
    go(&k.body, buffer, shape, write, &mut Vec::new(), &mut Vec::new(), &mut out);
    out
}

fn body_at<'a>(mut nodes: &'a mut Vec<Node>, path: &[usize]) -> &'a mut Vec<Node> {
    for &i in path {
        let Node::Loop(l) = &mut nodes[i] else { unreachable!("path runs through loops") };
        nodes = &mut l.body;
    }
    nodes
}

fn drop_global(k: &mut KernelIR, formal: &str) {
    if let Some(o) = &mut k.origin {
        o.buffer_map.remove(formal);
    }
}

/// Producer side: `output` leaves through `chans` instead of global memory.
fn stream_out(k: &mut KernelIR, chans: &[String]) {
    let decl = k.buffer("output").expect("producer writes output").clone();
    let shape = const_shape(&decl).expect("pipelined kernels are constant");
    let s = sites(k, "output", &shape, true);
    if let [site] = s.as_slice() {
        if site.stream {
            let (last, parent) = site.path.split_last().expect("non-empty");
            let tmp = fresh(k, "wr");
            let body = body_at(&mut k.body, parent);
            let Node::Stmt(Stmt::Store { value, .. }) = body[*last].clone() else { unreachable!() };
            let mut repl = Vec::new();
            if chans.len() == 1 {
                repl.push(Node::Stmt(Stmt::ChannelWrite { channel: chans[0].clone(), value }));
            } else {
                repl.push(Node::Stmt(Stmt::Store { dst: BufAccess::scalar(&tmp), value }));
                for c in chans {
                    repl.push(Node::Stmt(Stmt::ChannelWrite {
                        channel: c.clone(),
                        value: Expr::Load(BufAccess::scalar(&tmp)),
                    }));
                }
                k.buffers.push(BufferDecl::new(&tmp, MemSpace::Register, vec![Dim::Const(1)], Access::ReadWrite));
            }
            let body = body_at(&mut k.body, parent);
            body.splice(*last..*last + 1, repl);
            k.buffers.retain(|b| b.name != "output");
            drop_global(k, "output");
            k.channels_out.extend(chans.iter().cloned());
            return;
        }
    }
    // Stage the whole map locally, then drain it.
    k.buffer_mut("output").expect("declared").space = MemSpace::Local;
    let drain = nest(k, "d", &shape, |idx| {
        chans
            .iter()
            .map(|c| {
                Node::Stmt(Stmt::ChannelWrite {
                    channel: c.clone(),
                    value: Expr::Load(BufAccess::new("output", idx.clone())),
                })
            })
            .collect()
    });
    k.body.push(drain);
    drop_global(k, "output");
    k.channels_out.extend(chans.iter().cloned());
}

/// Consumer side: formal `buffer` arrives through `chan`.
fn stream_in(k: &mut KernelIR, buffer: &str, chan: &str) {
    let decl = k.buffer(buffer).expect("consumer reads buffer").clone();
    let shape = const_shape(&decl).expect("pipelined kernels are constant");
    let s = sites(k, buffer, &shape, false);
    if let [site] = s.as_slice() {
        if site.stream {
            let (last, parent) = site.path.split_last().expect("non-empty");
            let tmp = fresh(k, &format!("rd_{buffer}"));
            let body = body_at(&mut k.body, parent);
            let Node::Stmt(stmt) = &mut body[*last] else { unreachable!() };
            stmt.visit_accesses_mut(&mut |a| {
                if a.buffer == buffer {
                    *a = BufAccess::scalar(&tmp);
                }
            });
            body.insert(
                *last,
                Node::Stmt(Stmt::ChannelRead { channel: chan.to_string(), dst: BufAccess::scalar(&tmp) }),
            );
            k.buffers.retain(|b| b.name != buffer);
            k.buffers.push(BufferDecl::new(&tmp, MemSpace::Register, vec![Dim::Const(1)], Access::ReadWrite));
            drop_global(k, buffer);
            k.channels_in.push(chan.to_string());
            return;
        }
    }
    k.buffer_mut(buffer).expect("declared").space = MemSpace::Local;
    let stage = nest(k, "s", &shape, |idx| {
        vec![Node::Stmt(Stmt::ChannelRead { channel: chan.to_string(), dst: BufAccess::new(buffer, idx) })]
    });
    k.body.insert(0, stage);
    drop_global(k, buffer);
    k.channels_in.push(chan.to_string());
}

/// Replaces every kernel-to-kernel feature map with a channel. Consumers
/// that read the map once in order stream it; others stage it into Local
/// memory first. Producers with several consumers write every channel.
pub fn channelize(plan: &mut ExecutionPlan) -> Result<(), PlanError> {
    if plan.mode != Mode::Pipelined {
        return Err(mismatch("channelize", plan.mode));
    }
    let producer_of: BTreeMap<String, usize> = plan
        .kernels
        .iter()
        .enumerate()
        .filter_map(|(i, k)| k.origin.as_ref().and_then(|o| o.buffer_map.get("output")).map(|t| (t.clone(), i)))
        .collect();
    // (producer, consumer, formal buffer, channel name)
    let mut edges: Vec<(usize, usize, String, String)> = Vec::new();
    for (ci, k) in plan.kernels.iter().enumerate() {
        let Some(o) = &k.origin else { continue };
        for b in k.buffers.iter().filter(|b| b.space == MemSpace::Global && b.access == Access::Read) {
            let Some(t) = o.buffer_map.get(&b.name) else { continue };
            let Some(&pi) = producer_of.get(t) else { continue };
            if pi == ci {
                continue;
            }
            let p = &plan.kernels[pi].id;
            let name = if b.name == "input" {
                format!("ch_{p}_to_{}", k.id)
            } else {
                format!("ch_{p}_to_{}_{}", k.id, b.name)
            };
            edges.push((pi, ci, b.name.clone(), name));
        }
    }
    let depths: BTreeMap<usize, usize> = edges
        .iter()
        .map(|(pi, ..)| {
            let out = plan.kernels[*pi].buffer("output").and_then(BufferDecl::const_elems).unwrap_or(1);
            (*pi, next_pow2(out))
        })
        .collect();
    for (pi, ci, _, name) in &edges {
        plan.channels.push(ChannelDecl {
            name: name.clone(),
            depth: depths[pi],
            producer: plan.kernels[*pi].id.clone(),
            consumer: plan.kernels[*ci].id.clone(),
        });
    }
    let mut outgoing: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (pi, _, _, name) in &edges {
        outgoing.entry(*pi).or_default().push(name.clone());
    }
    for (ci, _, _, _) in edges.iter().map(|e| (e.1, 0, 0, 0)).collect::<BTreeSet<_>>() {
        for (_, _, buffer, name) in edges.iter().filter(|e| e.1 == ci) {
            stream_in(&mut plan.kernels[ci], buffer, name);
        }
    }
    for (pi, chans) in &outgoing {
        stream_out(&mut plan.kernels[*pi], chans);
    }
    for k in &mut plan.kernels {
        k.refresh_access();
    }
    for inv in &mut plan.invocations {
        let k = plan.kernels.iter().find(|k| k.id == inv.kernel).expect("known kernel");
        inv.buffers.retain(|f, _| k.buffer(f).is_some_and(|b| b.space == MemSpace::Global));
    }
    Ok(())
}

/// Depth of every channel: the producer's whole output map, rounded up to a
/// power of two.
pub fn channel_depths(plan: &ExecutionPlan) -> BTreeMap<String, usize> {
    plan.channels.iter().map(|c| (c.name.clone(), c.depth)).collect()
}

/// Kernels with no Global buffer and no scalar parameter run without the
/// host.
pub fn mark_autorun(plan: &mut ExecutionPlan) -> Result<(), PlanError> {
    if plan.mode != Mode::Pipelined {
        return Err(mismatch("mark_autorun", plan.mode));
    }
    for k in &mut plan.kernels {
        k.autorun = k.params.is_empty() && k.global_buffers().next().is_none();
    }
    Ok(())
}
