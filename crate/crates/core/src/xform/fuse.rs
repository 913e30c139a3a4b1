use std::collections::BTreeSet;

use super::{XformError, XformStep};
use crate::loopir::{AffineExpr, BufferDecl, Dim, Expr, KernelIR, LoopNode, Node, Stmt};

/// The elementwise function of a post-op kernel: its store value over
/// loop vars `(c, y, x)` reading `input[c, y, x]`.
struct PostFn {
    vars: Vec<String>,
    value: Expr,
}

fn post_fn(post: &KernelIR) -> Result<PostFn, XformError> {
    let mismatch = |m: &str| XformError::FusionMismatch(format!("'{}' {m}", post.id));
    let kind = post.origin.as_ref().map(|o| o.layer.kind()).ok_or_else(|| mismatch("has no layer origin"))?;
    if !kind.is_post_op() {
        return Err(mismatch(&format!("is a {kind} kernel, not an elementwise post-op")));
    }
    let mut stmts = Vec::new();
    post.visit_stmts(&mut |s, loops| stmts.push((s.clone(), loops.iter().map(|l| l.var.clone()).collect::<Vec<_>>())));
    let [(Stmt::Store { dst, value }, vars)] = stmts.as_slice() else {
        return Err(mismatch("is not a single-store elementwise nest"));
    };
    let ident: Vec<AffineExpr> = vars.iter().map(|v| AffineExpr::var(v)).collect();
    if dst.buffer != "output" || dst.index != ident {
        return Err(mismatch("does not write output elementwise"));
    }
    let mut ok = true;
    value.visit_loads(&mut |a| {
        if a.buffer == "input" && (a.index != ident || a.guard.is_some()) {
            ok = false;
        }
    });
    if !ok {
        return Err(mismatch("reads its input at a shifted index"));
    }
    Ok(PostFn { vars: vars.clone(), value: value.clone() })
}

fn dims_match(a: &[Dim], b: &[Dim]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| match (x, y) {
            (Dim::Const(p), Dim::Const(q)) => p == q,
            // Symbolic producers are fused by replay after a concrete check.
            _ => true,
        })
}

/// Replaces every `input[..]` load in `e` with `with`.
fn splice(e: &Expr, with: &Expr) -> Expr {
    match e {
        Expr::Load(a) if a.buffer == "input" => with.clone(),
        Expr::Unary(op, x) => Expr::unary(*op, splice(x, with)),
        Expr::Binary(op, a, b) => Expr::binary(*op, splice(a, with), splice(b, with)),
        Expr::ScaleShift(x, s, t) => Expr::scale_shift(splice(x, with), splice(s, with), splice(t, with)),
        other => other.clone(),
    }
}

/// The last statement writing `output`, with the path of body indices
/// leading to it and its enclosing loops.
fn last_output_write(nodes: &[Node], path: &mut Vec<usize>, best: &mut Option<Vec<usize>>) {
    for (i, n) in nodes.iter().enumerate() {
        path.push(i);
        match n {
            Node::Stmt(s) if s.writes().is_some_and(|w| w.buffer == "output") => {
                *best = Some(path.clone());
            }
            Node::Loop(l) => last_output_write(&l.body, path, best),
            Node::Stmt(_) => {}
        }
        path.pop();
    }
}

fn loops_on_path<'a>(mut nodes: &'a [Node], path: &[usize]) -> Vec<&'a LoopNode> {
    let mut out = Vec::new();
    for &i in &path[..path.len() - 1] {
        let Node::Loop(l) = &nodes[i] else { unreachable!("path runs through loops") };
        out.push(l);
        nodes = &l.body;
    }
    out
}

fn body_at<'a>(mut nodes: &'a mut Vec<Node>, path: &[usize]) -> &'a mut Vec<Node> {
    for &i in path {
        let Node::Loop(l) = &mut nodes[i] else { unreachable!("path runs through loops") };
        nodes = &mut l.body;
    }
    nodes
}

/// Folds an elementwise post-op kernel (relu, relu6, batchnorm) into the
/// producer's final write of `output`. The post-op's parameter buffers move
/// into the producer as `post<n>_<name>` and its output tensor becomes the
/// producer's.
pub fn fuse_postop(producer: &KernelIR, post: &KernelIR) -> Result<KernelIR, XformError> {
    let f = post_fn(post)?;
    let mismatch = |m: String| XformError::FusionMismatch(m);
    let out_decl = producer
        .buffer("output")
        .ok_or_else(|| mismatch(format!("'{}' has no output buffer", producer.id)))?;
    let in_decl = post.buffer("input").expect("post-op reads input");
    let post_out = post.buffer("output").expect("post-op writes output");
    if !dims_match(&out_decl.shape, &in_decl.shape) || !dims_match(&in_decl.shape, &post_out.shape) {
        return Err(mismatch(format!(
            "shape {:?} of '{}' does not match input {:?} of '{}'",
            out_decl.shape, producer.id, in_decl.shape, post.id
        )));
    }
    if let (Some(po), Some(qo)) = (&producer.origin, &post.origin) {
        if po.buffer_map.get("output") != qo.buffer_map.get("input") {
            return Err(mismatch(format!("'{}' does not consume '{}'", post.id, producer.id)));
        }
    }

    let mut best = None;
    last_output_write(&producer.body, &mut Vec::new(), &mut best);
    let path = best.ok_or_else(|| mismatch(format!("'{}' never writes output", producer.id)))?;
    let loops = loops_on_path(&producer.body, &path);
    let mut last = &producer.body[path[0]];
    for &i in &path[1..] {
        let Node::Loop(l) = last else { unreachable!() };
        last = &l.body[i];
    }
    let Node::Stmt(last_stmt) = last else { unreachable!() };
    let dst = last_stmt.writes().expect("writes output").clone();
    if dst.guard.is_some() {
        return Err(mismatch("guarded output store".into()));
    }

    // Post-op parameter buffers, renamed and reshaped over producer dims.
    let n = producer.origin.as_ref().map_or(0, |o| o.posts.len());
    let taken: BTreeSet<&str> = producer.buffers.iter().map(|b| b.name.as_str()).collect();
    let mut new_bufs = Vec::new();
    let mut renames = Vec::new();
    for b in post.buffers.iter().filter(|b| b.name != "input" && b.name != "output") {
        let name = format!("post{n}_{}", b.name);
        if taken.contains(name.as_str()) {
            return Err(mismatch(format!("buffer '{name}' already exists")));
        }
        let mut shape = b.shape.clone();
        f.value.visit_loads(&mut |a| {
            if a.buffer == b.name {
                for (d, e) in shape.iter_mut().zip(&a.index) {
                    if let Some(pos) = f.vars.iter().position(|v| *e == AffineExpr::var(v)) {
                        *d = out_decl.shape[pos].clone();
                    }
                }
            }
        });
        renames.push((b.name.clone(), name.clone()));
        new_bufs.push(BufferDecl { name, shape, ..b.clone() });
    }

    // The post function over the producer's output index.
    let mut g = f.value.clone();
    g.map_affine(&mut |e| {
        // Two passes so producer vars named like post vars are not captured.
        let mut e = e.clone();
        for (i, v) in f.vars.iter().enumerate() {
            e = e.rename(v, &format!("#{i}"));
        }
        for (i, idx) in dst.index.iter().enumerate() {
            e = e.substitute(&format!("#{i}"), idx);
        }
        e
    });
    g.visit_loads_mut(&mut |a| {
        if let Some((_, to)) = renames.iter().find(|(from, _)| *from == a.buffer) {
            a.buffer = to.clone();
        }
    });

    let band: BTreeSet<&str> = dst.index.iter().flat_map(|e| e.vars()).collect();
    let reduction = loops.iter().position(|l| !band.contains(l.var.as_str()));
    let mut out = producer.clone();
    match reduction {
        None => {
            let body = body_at(&mut out.body, &path[..path.len() - 1]);
            let at = *path.last().unwrap();
            match &mut body[at] {
                Node::Stmt(Stmt::Store { value, .. }) => *value = splice(&g, value),
                _ => {
                    let fixup = Stmt::Store { dst: dst.clone(), value: splice(&g, &Expr::Load(dst.clone())) };
                    body.insert(at + 1, Node::Stmt(fixup));
                }
            }
        }
        Some(r) => {
            if loops[r..].iter().any(|l| band.contains(l.var.as_str())) {
                return Err(mismatch(format!(
                    "'{}' interleaves reduction and output loops",
                    producer.id
                )));
            }
            let fixup = Stmt::Store { dst: dst.clone(), value: splice(&g, &Expr::Load(dst.clone())) };
            let body = body_at(&mut out.body, &path[..r]);
            body.insert(path[r] + 1, Node::Stmt(fixup));
        }
    }
    out.buffers.extend(new_bufs);
    if let (Some(o), Some(q)) = (&mut out.origin, &post.origin) {
        for (from, to) in &renames {
            if let Some(t) = q.buffer_map.get(from) {
                o.buffer_map.insert(to.clone(), t.clone());
            }
        }
        if let Some(t) = q.buffer_map.get("output") {
            o.buffer_map.insert("output".into(), t.clone());
        }
        o.posts.push(q.layer.clone());
    }
    out.refresh_access();
    out.history.push(XformStep::FusePostOp { post: post.id.clone() });
    Ok(out)
}
