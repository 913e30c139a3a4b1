use std::collections::BTreeSet;

use super::{XformError, XformStep};
use crate::loopir::{AffineExpr, Bindings, DerivedSym, Dim, KernelIR, LoopNode, Node, Requirement, SymExpr};

fn find_loop_mut<'a>(nodes: &'a mut [Node], var: &str) -> Option<&'a mut LoopNode> {
    for n in nodes {
        if let Node::Loop(l) = n {
            if l.var == var {
                return Some(l);
            }
            if let Some(found) = find_loop_mut(&mut l.body, var) {
                return Some(found);
            }
        }
    }
    None
}

fn loop_of<'a>(k: &'a KernelIR, var: &str) -> Result<&'a LoopNode, XformError> {
    k.find_loop(var)
        .ok_or_else(|| XformError::UnknownLoop { kernel: k.id.clone(), var: var.to_string() })
}

/// A loop or symbol name not yet used in `k`.
fn fresh(k: &KernelIR, base: &str) -> String {
    let taken: BTreeSet<String> = k
        .loop_vars()
        .into_iter()
        .chain(k.symbol_names())
        .chain(k.buffers.iter().map(|b| b.name.clone()))
        .collect();
    if !taken.contains(base) {
        return base.to_string();
    }
    (2..).map(|i| format!("{base}{i}")).find(|n| !taken.contains(n)).expect("unbounded")
}

/// Marks a constant-extent loop for full replication.
pub fn unroll_full(k: &KernelIR, var: &str) -> Result<KernelIR, XformError> {
    let l = loop_of(k, var)?;
    if let Dim::Sym(s) = &l.extent {
        return Err(XformError::SymbolicExtent { var: var.to_string(), extent: s.clone() });
    }
    let mut out = k.clone();
    find_loop_mut(&mut out.body, var).expect("found above").unroll_full = true;
    out.history.push(XformStep::UnrollFull { var: var.to_string() });
    Ok(out)
}

/// Unrolls by `factor`, which must be the whole extent; partial unrolling
/// is expressed as `strip_mine` followed by unrolling the inner loop.
pub fn unroll(k: &KernelIR, var: &str, factor: usize) -> Result<KernelIR, XformError> {
    let l = loop_of(k, var)?;
    match &l.extent {
        Dim::Sym(s) => Err(XformError::SymbolicExtent { var: var.to_string(), extent: s.clone() }),
        Dim::Const(e) if *e == factor => unroll_full(k, var),
        Dim::Const(e) => {
            Err(XformError::PartialUnrollRequested { var: var.to_string(), extent: *e, factor })
        }
    }
}

/// Replaces loop `var` by `var_o` (extent `outer`) around a fully unrolled
/// `var_i` (extent `f`), rewriting `var` to `f*var_o + var_i`.
fn split(k: &mut KernelIR, var: &str, f: usize, outer: Dim) {
    let vo = fresh(k, &format!("{var}_o"));
    let vi = fresh(k, &format!("{var}_i"));
    let l = find_loop_mut(&mut k.body, var).expect("caller checked");
    let repl = AffineExpr::term(&vo, f as i64) + AffineExpr::var(&vi);
    let mut body = std::mem::take(&mut l.body);
    substitute(&mut body, var, &repl);
    let inner = LoopNode { var: vi, extent: Dim::Const(f), unroll_full: true, body };
    l.var = vo;
    l.extent = outer;
    l.body = vec![Node::Loop(inner)];
}

fn substitute(nodes: &mut [Node], var: &str, with: &AffineExpr) {
    for n in nodes {
        match n {
            Node::Stmt(s) => s.map_affine(&mut |e| e.substitute(var, with)),
            Node::Loop(l) => substitute(&mut l.body, var, with),
        }
    }
}

fn check_factor(var: &str, extent: usize, factor: usize) -> Result<(), XformError> {
    if factor == 0 {
        return Err(XformError::ZeroFactor { var: var.to_string() });
    }
    if !extent.is_multiple_of(factor) {
        return Err(XformError::NonDivisible { var: var.to_string(), extent, factor });
    }
    Ok(())
}

/// Splits a constant-extent loop into an outer loop and an unrolled inner
/// loop of `factor` iterations.
pub fn strip_mine(k: &KernelIR, var: &str, factor: usize) -> Result<KernelIR, XformError> {
    let l = loop_of(k, var)?;
    let extent = match &l.extent {
        Dim::Const(e) => *e,
        Dim::Sym(s) => {
            return Err(XformError::SymbolicExtent { var: var.to_string(), extent: s.clone() })
        }
    };
    check_factor(var, extent, factor)?;
    let mut out = k.clone();
    split(&mut out, var, factor, Dim::Const(extent / factor));
    out.history.push(XformStep::StripMine { var: var.to_string(), factor });
    Ok(out)
}

/// `strip_mine` that also accepts a symbolic extent. The factor must divide
/// the extent under every binding in `bindings`; the kernel then records
/// that as a requirement and derives the outer trip count.
pub fn strip_mine_symbolic(
    k: &KernelIR,
    var: &str,
    factor: usize,
    bindings: &[Bindings],
) -> Result<KernelIR, XformError> {
    let l = loop_of(k, var)?;
    let Dim::Sym(sym) = l.extent.clone() else {
        return strip_mine(k, var, factor);
    };
    if factor == 0 {
        return Err(XformError::ZeroFactor { var: var.to_string() });
    }
    for b in bindings {
        let env = k.resolve_env(b)?;
        let e = *env.get(&sym).expect("resolved") as usize;
        check_factor(var, e, factor)?;
    }
    let mut out = k.clone();
    let name = fresh(&out, &format!("{sym}_d{factor}"));
    out.derived.push(DerivedSym {
        name: name.clone(),
        expr: SymExpr::floor_div(SymExpr::param(&sym), SymExpr::Const(factor as i64)),
    });
    out.requires.push(Requirement { expr: SymExpr::param(&sym), divisor: factor as i64 });
    split(&mut out, var, factor, Dim::Sym(name));
    out.history.push(XformStep::StripMine { var: var.to_string(), factor });
    Ok(out)
}

/// Checks that `vars` all lie on one chain of nested loops.
fn check_nesting(k: &KernelIR, vars: &[String]) -> Result<(), XformError> {
    for v in vars {
        loop_of(k, v)?;
    }
    let mut chains: Vec<Vec<String>> = Vec::new();
    k.visit_stmts(&mut |_, loops| chains.push(loops.iter().map(|l| l.var.clone()).collect()));
    let together = chains.iter().any(|c| vars.iter().all(|v| c.contains(v)));
    if !together {
        return Err(XformError::NotPerfectlyNested(format!(
            "loops {vars:?} do not enclose a common statement"
        )));
    }
    Ok(())
}

fn tile_impl(
    k: &KernelIR,
    vars: &[String],
    factors: &[usize],
    bindings: Option<&[Bindings]>,
) -> Result<KernelIR, XformError> {
    if vars.len() != factors.len() {
        return Err(XformError::NotApplicable(format!(
            "{} loops but {} factors",
            vars.len(),
            factors.len()
        )));
    }
    check_nesting(k, vars)?;
    let mut out = k.clone();
    for (v, &f) in vars.iter().zip(factors) {
        out = match bindings {
            Some(b) => strip_mine_symbolic(&out, v, f, b)?,
            None => strip_mine(&out, v, f)?,
        };
        out.history.pop();
    }
    out.history.push(XformStep::Tile { loops: vars.to_vec(), factors: factors.to_vec() });
    Ok(out)
}

/// Strip-mines several loops of one nest at once. Every factor is checked
/// before anything changes.
pub fn tile(k: &KernelIR, vars: &[String], factors: &[usize]) -> Result<KernelIR, XformError> {
    tile_impl(k, vars, factors, None)
}

pub fn tile_symbolic(
    k: &KernelIR,
    vars: &[String],
    factors: &[usize],
    bindings: &[Bindings],
) -> Result<KernelIR, XformError> {
    tile_impl(k, vars, factors, Some(bindings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loopir::lower_layer;
    use crate::netdef::{LayerOp, LayerSpec, Padding, Shape};

    fn conv() -> KernelIR {
        let l = LayerSpec::new(
            "conv",
            LayerOp::Conv2d { filters: 4, kh: 3, kw: 3, stride: 1, padding: Padding::Same, bias: true },
            &["input"],
        );
        lower_layer(&l, &[Shape::new(6, 5, 5)]).unwrap()
    }

    fn run(k: &KernelIR) -> crate::loopir::Tensor {
        crate::xform::testutil::run_const(k, 3)
    }

    #[test]
    fn strip_mine_preserves_results() {
        let k = conv();
        let t = strip_mine(&k, "f", 2).unwrap();
        assert_eq!(t.loop_vars(), ["f_o", "f_i", "oy", "ox", "ic", "ky", "kx"]);
        assert!(t.find_loop("f_i").unwrap().unroll_full);
        assert_eq!(run(&k), run(&t));
    }

    #[test]
    fn strip_mine_rejects_non_divisor() {
        assert_eq!(
            strip_mine(&conv(), "ic", 4).unwrap_err(),
            XformError::NonDivisible { var: "ic".into(), extent: 6, factor: 4 }
        );
    }

    #[test]
    fn partial_unroll_is_refused() {
        assert!(matches!(
            unroll(&conv(), "ic", 2),
            Err(XformError::PartialUnrollRequested { extent: 6, factor: 2, .. })
        ));
        assert!(unroll(&conv(), "kx", 3).unwrap().find_loop("kx").unwrap().unroll_full);
    }

    #[test]
    fn tile_checks_all_factors_first() {
        let k = conv();
        let err = tile(&k, &["f".into(), "ic".into()], &[2, 4]).unwrap_err();
        assert!(matches!(err, XformError::NonDivisible { .. }));
        let t = tile(&k, &["f".into(), "ic".into()], &[2, 3]).unwrap();
        assert_eq!(t.history.last().unwrap().abbrev(), "LT");
        assert_eq!(run(&k), run(&t));
    }
}
