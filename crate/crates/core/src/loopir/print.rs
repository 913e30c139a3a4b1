use std::fmt::Write;

use super::{Access, BinOp, BufAccess, Expr, KernelIR, MemSpace, Node, Stmt, UnOp};

fn access(a: &BufAccess) -> String {
    let idx: Vec<String> = a.index.iter().map(|e| e.to_string()).collect();
    let mut s = format!("{}[{}]", a.buffer, idx.join(", "));
    if let Some(g) = a.guard {
        write!(s, "?{}", float(g)).unwrap();
    }
    s
}

fn float(v: f32) -> String {
    if v == f32::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}

pub(crate) fn expr(e: &Expr) -> String {
    match e {
        Expr::Const(c) => float(*c),
        Expr::Load(a) => access(a),
        Expr::Index(a) => format!("float({a})"),
        Expr::Unary(UnOp::Relu, x) => format!("relu({})", expr(x)),
        Expr::Unary(UnOp::Relu6, x) => format!("relu6({})", expr(x)),
        Expr::Binary(op, a, b) => {
            let sym = match op {
                BinOp::Add => "+",
                BinOp::Mul => "*",
                BinOp::Div => "/",
                BinOp::Max => return format!("max({}, {})", expr(a), expr(b)),
            };
            format!("({} {sym} {})", expr(a), expr(b))
        }
        Expr::ScaleShift(x, s, t) => format!("fma({}, {}, {})", expr(x), expr(s), expr(t)),
    }
}

fn nodes(out: &mut String, ns: &[Node], depth: usize) {
    let pad = "  ".repeat(depth);
    for n in ns {
        match n {
            Node::Loop(l) => {
                let unroll = if l.unroll_full { " unroll" } else { "" };
                writeln!(out, "{pad}for {} in 0..{}{unroll} {{", l.var, l.extent).unwrap();
                nodes(out, &l.body, depth + 1);
                writeln!(out, "{pad}}}").unwrap();
            }
            Node::Stmt(s) => {
                let line = match s {
                    Stmt::Store { dst, value } => format!("{} = {}", access(dst), expr(value)),
                    Stmt::Mac { acc, a, b } => {
                        format!("{} += {} * {}", access(acc), expr(a), expr(b))
                    }
                    Stmt::ChannelRead { channel, dst } => {
                        format!("{} = read_channel({channel})", access(dst))
                    }
                    Stmt::ChannelWrite { channel, value } => {
                        format!("write_channel({channel}, {})", expr(value))
                    }
                };
                writeln!(out, "{pad}{line}").unwrap();
            }
        }
    }
}

/// Stable text rendering of a kernel, used for golden files.
pub fn print_kernel(k: &KernelIR) -> String {
    let mut out = String::new();
    write!(out, "kernel {}", k.id).unwrap();
    if k.autorun {
        out.push_str(" autorun");
    }
    out.push('\n');
    if !k.params.is_empty() {
        writeln!(out, "  params {}", k.params.join(", ")).unwrap();
    }
    for d in &k.derived {
        writeln!(out, "  let {} = {}", d.name, d.expr).unwrap();
    }
    for r in &k.requires {
        writeln!(out, "  require {} % {} == 0", r.expr, r.divisor).unwrap();
    }
    for b in &k.buffers {
        let space = match b.space {
            MemSpace::Global => "global",
            MemSpace::Local => "local",
            MemSpace::Register => "register",
        };
        let access = match b.access {
            Access::Read => "r",
            Access::Write => "w",
            Access::ReadWrite => "rw",
        };
        let shape: Vec<String> = b.shape.iter().map(|d| d.to_string()).collect();
        writeln!(out, "  {space} {access} {}[{}]", b.name, shape.join(", ")).unwrap();
    }
    for c in &k.channels_in {
        writeln!(out, "  channel in {c}").unwrap();
    }
    for c in &k.channels_out {
        writeln!(out, "  channel out {c}").unwrap();
    }
    nodes(&mut out, &k.body, 1);
    out
}
