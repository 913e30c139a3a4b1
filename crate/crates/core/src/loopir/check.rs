use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::{Dim, KernelIR, LoopNode, MemSpace, Stmt};
use crate::plan::{ExecutionPlan, Mode};

/// Registers beyond this many elements belong in Local memory.
const MAX_REGISTER_ELEMS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub code: &'static str,
    pub kernel: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]: {}", self.code, self.kernel, self.detail)
    }
}

fn v(code: &'static str, kernel: &str, detail: impl Into<String>) -> Violation {
    Violation { code, kernel: kernel.to_string(), detail: detail.into() }
}

/// Per-kernel invariants. An empty list means the kernel is well formed.
pub fn check_kernel(k: &KernelIR) -> Vec<Violation> {
    let mut out = Vec::new();
    let id = k.id.as_str();
    let symbols: BTreeSet<String> = k.symbol_names().into_iter().collect();
    let mut seen_sym = BTreeSet::new();
    for s in k.symbol_names() {
        if !seen_sym.insert(s.clone()) {
            out.push(v("duplicate-symbol", id, s));
        }
    }
    let mut names = BTreeSet::new();
    for b in &k.buffers {
        if !names.insert(b.name.as_str()) {
            out.push(v("duplicate-buffer", id, b.name.clone()));
        }
        for d in &b.shape {
            match d {
                Dim::Const(0) => out.push(v("zero-extent", id, format!("buffer '{}'", b.name))),
                Dim::Sym(s) if !symbols.contains(s) => {
                    out.push(v("unbound-symbol", id, format!("'{s}' in buffer '{}'", b.name)))
                }
                Dim::Sym(_) if b.space != MemSpace::Global => out.push(v(
                    "local-symbolic-shape",
                    id,
                    format!("buffer '{}'", b.name),
                )),
                _ => {}
            }
        }
        if b.space == MemSpace::Register
            && b.const_elems().is_some_and(|n| n > MAX_REGISTER_ELEMS)
        {
            out.push(v("register-too-large", id, b.name.clone()));
        }
    }
    if k.autorun && k.global_buffers().next().is_some() {
        out.push(v(
            "autorun-with-global",
            id,
            format!(
                "global buffers {:?}",
                k.global_buffers().map(|b| b.name.as_str()).collect::<Vec<_>>()
            ),
        ));
    }
    if k.autorun && !k.params.is_empty() {
        out.push(v("autorun-with-params", id, format!("{:?}", k.params)));
    }

    let mut loop_vars = BTreeSet::new();
    k.visit_loops(&mut |l, _| {
        if !loop_vars.insert(l.var.clone()) {
            out.push(v("duplicate-loop-var", id, l.var.clone()));
        }
        if symbols.contains(&l.var) {
            out.push(v("loop-var-shadows-symbol", id, l.var.clone()));
        }
        match &l.extent {
            Dim::Sym(s) if l.unroll_full => {
                out.push(v("unroll-symbolic-extent", id, format!("loop '{}' over {s}", l.var)))
            }
            Dim::Sym(s) if !symbols.contains(s) => {
                out.push(v("unbound-symbol", id, format!("'{s}' bounds loop '{}'", l.var)))
            }
            Dim::Const(0) => out.push(v("zero-extent", id, format!("loop '{}'", l.var))),
            _ => {}
        }
    });

    let decl: BTreeMap<&str, usize> = k.buffers.iter().map(|b| (b.name.as_str(), b.shape.len())).collect();
    k.visit_stmts(&mut |s, loops: &[&LoopNode]| {
        let scope: BTreeSet<&str> = loops.iter().map(|l| l.var.as_str()).collect();
        let mut accesses = s.reads();
        accesses.extend(s.writes());
        for a in accesses {
            match decl.get(a.buffer.as_str()) {
                None => out.push(v("undeclared-buffer", id, a.buffer.clone())),
                Some(&rank) if rank != a.index.len() => out.push(v(
                    "rank-mismatch",
                    id,
                    format!("'{}' has rank {rank}, indexed with {}", a.buffer, a.index.len()),
                )),
                _ => {}
            }
            for e in &a.index {
                for n in e.vars() {
                    if !scope.contains(n) && !symbols.contains(n) {
                        out.push(v(
                            "unbound-index-var",
                            id,
                            format!("'{n}' in access to '{}'", a.buffer),
                        ));
                    }
                }
            }
        }
        match s {
            Stmt::ChannelRead { channel, .. } if !k.channels_in.contains(channel) => {
                out.push(v("undeclared-channel", id, format!("reads '{channel}'")))
            }
            Stmt::ChannelWrite { channel, .. } if !k.channels_out.contains(channel) => {
                out.push(v("undeclared-channel", id, format!("writes '{channel}'")))
            }
            _ => {}
        }
    });
    out
}

/// Whole-plan invariants: every kernel's, plus channel endpoints, mode rules
/// and invocation bindings. An empty list means the plan is valid.
pub fn structural_check(plan: &ExecutionPlan) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for k in &plan.kernels {
        if !ids.insert(k.id.as_str()) {
            out.push(v("duplicate-kernel", &k.id, "kernel id used twice"));
        }
        out.extend(check_kernel(k));
    }

    let mut readers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut writers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for k in &plan.kernels {
        for c in &k.channels_in {
            readers.entry(c).or_default().push(&k.id);
        }
        for c in &k.channels_out {
            writers.entry(c).or_default().push(&k.id);
        }
    }
    let mut declared = BTreeSet::new();
    for ch in &plan.channels {
        if !declared.insert(ch.name.as_str()) {
            out.push(v("duplicate-channel", &ch.producer, ch.name.clone()));
        }
        if ch.depth == 0 {
            out.push(v("channel-depth", &ch.producer, format!("'{}' has depth 0", ch.name)));
        }
        let r = readers.get(ch.name.as_str()).cloned().unwrap_or_default();
        let w = writers.get(ch.name.as_str()).cloned().unwrap_or_default();
        if r.len() > 1 {
            out.push(v("channel-multi-consumer", &ch.consumer, format!("'{}' read by {r:?}", ch.name)));
        }
        if w.len() > 1 {
            out.push(v("channel-multi-producer", &ch.producer, format!("'{}' written by {w:?}", ch.name)));
        }
        if r != [ch.consumer.as_str()] && r.len() <= 1 {
            out.push(v(
                "channel-endpoint",
                &ch.consumer,
                format!("'{}' should be read by '{}', read by {r:?}", ch.name, ch.consumer),
            ));
        }
        if w != [ch.producer.as_str()] && w.len() <= 1 {
            out.push(v(
                "channel-endpoint",
                &ch.producer,
                format!("'{}' should be written by '{}', written by {w:?}", ch.name, ch.producer),
            ));
        }
    }
    for (c, ks) in readers.iter().chain(writers.iter()) {
        if !declared.contains(c) {
            out.push(v("undeclared-channel", ks[0], format!("'{c}' has no declaration")));
        }
    }

    match plan.mode {
        Mode::Folded => {
            if !plan.channels.is_empty() {
                out.push(v("folded-with-channels", "", format!("{} channels", plan.channels.len())));
            }
            for k in plan.kernels.iter().filter(|k| k.autorun) {
                out.push(v("autorun-in-folded", &k.id, "autorun requires pipelined mode"));
            }
            let queues: BTreeSet<usize> = plan.queues.values().copied().collect();
            if queues.len() > 1 {
                out.push(v("folded-multi-queue", "", format!("{} queues", queues.len())));
            }
        }
        Mode::Pipelined => {
            for k in &plan.kernels {
                let n = plan.invocations.iter().filter(|i| i.kernel == k.id).count();
                if n != 1 {
                    out.push(v("pipelined-invocations", &k.id, format!("{n} invocations")));
                }
            }
        }
    }

    for inv in &plan.invocations {
        let Some(k) = plan.kernels.iter().find(|k| k.id == inv.kernel) else {
            out.push(v("unknown-kernel", &inv.kernel, format!("invoked for layer '{}'", inv.layer)));
            continue;
        };
        for p in &k.params {
            if !inv.bindings.contains_key(p) {
                out.push(v("unbound-param", &k.id, format!("'{p}' for layer '{}'", inv.layer)));
            }
        }
        for b in k.global_buffers() {
            if !inv.buffers.contains_key(&b.name) {
                out.push(v("unmapped-buffer", &k.id, format!("'{}' for layer '{}'", b.name, inv.layer)));
            }
        }
    }
    out.sort();
    out.dedup();
    out
}
