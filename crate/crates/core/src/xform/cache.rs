use std::collections::BTreeSet;

use super::{XformError, XformStep};
use crate::loopir::{Access, AffineExpr, BufAccess, BufferDecl, Dim, Expr, KernelIR, MemSpace, Node, Stmt};

struct Site {
    path: Vec<usize>,
    loops: Vec<String>,
    index: Vec<AffineExpr>,
    reads_self: bool,
    writes: bool,
}

fn collect(nodes: &[Node], buffer: &str, path: &mut Vec<usize>, loops: &mut Vec<String>, out: &mut Vec<Site>) {
    for (i, n) in nodes.iter().enumerate() {
        path.push(i);
        match n {
            Node::Loop(l) => {
                loops.push(l.var.clone());
                collect(&l.body, buffer, path, loops, out);
                loops.pop();
            }
            Node::Stmt(s) => {
                let reads: Vec<&BufAccess> = s.reads().into_iter().filter(|a| a.buffer == buffer).collect();
                let write = s.writes().filter(|a| a.buffer == buffer);
                if let Some(a) = write.or(reads.first().copied()) {
                    let mut index = a.index.clone();
                    if reads.iter().any(|r| r.index != index) || write.is_some_and(|w| w.index != index) {
                        // Mixed indices within one statement: poison the site.
                        index.clear();
                    }
                    out.push(Site {
                        path: path.clone(),
                        loops: loops.clone(),
                        index,
                        reads_self: !reads.is_empty(),
                        writes: write.is_some(),
                    });
                }
            }
        }
        path.pop();
    }
}

fn body_at<'a>(mut nodes: &'a mut Vec<Node>, path: &[usize]) -> &'a mut Vec<Node> {
    for &i in path {
        let Node::Loop(l) = &mut nodes[i] else { unreachable!("path runs through loops") };
        nodes = &mut l.body;
    }
    nodes
}

/// Keeps a reduction's running value in a register. The accumulation
/// pattern is an initializing store to `buffer[I]`, updates of `buffer[I]`
/// inside loops that do not index it, and optional trailing stores; all of
/// them move to register `acc` and one final store writes `buffer[I]`.
pub fn cache_writes(k: &KernelIR, buffer: &str) -> Result<KernelIR, XformError> {
    let none = |m: String| XformError::NoAccumulationPattern(format!("'{buffer}' in '{}': {m}", k.id));
    let decl = k
        .buffer(buffer)
        .ok_or_else(|| XformError::UnknownBuffer { kernel: k.id.clone(), buffer: buffer.to_string() })?;
    if decl.space == MemSpace::Register {
        return Err(none("already a register".into()));
    }
    let mut sites = Vec::new();
    collect(&k.body, buffer, &mut Vec::new(), &mut Vec::new(), &mut sites);
    let Some(first) = sites.first() else {
        return Err(none("never accessed".into()));
    };
    let index = first.index.clone();
    if index.is_empty() || sites.iter().any(|s| s.index != index) {
        return Err(none("accessed at more than one index".into()));
    }
    let band: BTreeSet<&str> = index.iter().flat_map(|e| e.vars()).collect();
    let accumulates = sites
        .iter()
        .any(|s| s.writes && s.reads_self && s.loops.iter().any(|v| !band.contains(v.as_str())));
    if !accumulates {
        return Err(none("no reduction updates it".into()));
    }
    if first.reads_self || !first.writes {
        return Err(none("first access is not an initializing store".into()));
    }

    // Innermost loop enclosing every access.
    let mut common = first.path.len() - 1;
    for s in &sites[1..] {
        common = common.min(s.path.len() - 1);
        common = common.min(first.path.iter().zip(&s.path).take_while(|(a, b)| a == b).count());
    }
    let prefix = first.path[..common].to_vec();
    let scope: BTreeSet<&str> = first.loops[..common].iter().map(String::as_str).collect();
    if let Some(v) = band.iter().find(|v| !scope.contains(*v) && !k.symbol_names().iter().any(|s| s == *v)) {
        return Err(none(format!("index var '{v}' is not bound around all accesses")));
    }
    let last = sites.iter().map(|s| s.path[common]).max().expect("non-empty");

    let mut out = k.clone();
    let taken: BTreeSet<String> = out.buffers.iter().map(|b| b.name.clone()).collect();
    let acc = if taken.contains("acc") {
        (2..).map(|i| format!("acc{i}")).find(|n| !taken.contains(n)).expect("unbounded")
    } else {
        "acc".to_string()
    };
    let body = body_at(&mut out.body, &prefix);
    fn redirect(nodes: &mut [Node], buffer: &str, acc: &str) {
        for n in nodes {
            match n {
                Node::Loop(l) => redirect(&mut l.body, buffer, acc),
                Node::Stmt(s) => s.visit_accesses_mut(&mut |a| {
                    if a.buffer == buffer {
                        *a = BufAccess::scalar(acc);
                    }
                }),
            }
        }
    }
    redirect(body, buffer, &acc);
    body.insert(
        last + 1,
        Node::Stmt(Stmt::Store {
            dst: BufAccess::new(buffer, index),
            value: Expr::Load(BufAccess::scalar(&acc)),
        }),
    );
    out.buffers.push(BufferDecl::new(&acc, MemSpace::Register, vec![Dim::Const(1)], Access::ReadWrite));
    out.refresh_access();
    out.history.push(XformStep::CacheWrites { buffer: buffer.to_string() });
    Ok(out)
}
