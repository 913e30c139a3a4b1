use std::collections::BTreeSet;
use std::fmt::Write;
use std::sync::OnceLock;

use regex::Regex;

use super::{EmitError, EMIT_FORMAT_VERSION};
use crate::loopir::{
    structural_check, Access, BinOp, BufAccess, BufferDecl, Dim, Expr, KernelIR, MemSpace,
    Node, Stmt, UnOp,
};
use crate::plan::ExecutionPlan;

const INDENT: &str = "    ";

fn float(v: f32) -> String {
    if v == f32::NEG_INFINITY {
        "-INFINITY".into()
    } else if v == f32::INFINITY {
        "INFINITY".into()
    } else {
        format!("{v:?}f")
    }
}

fn dim(d: &Dim) -> String {
    match d {
        Dim::Const(c) => c.to_string(),
        Dim::Sym(s) => s.clone(),
    }
}

struct Ctx<'a> {
    k: &'a KernelIR,
}

impl Ctx<'_> {
    fn decl(&self, name: &str) -> &BufferDecl {
        self.k.buffer(name).expect("checked plan declares every buffer")
    }

    /// Row-major flat offset, Horner form.
    fn flat(&self, a: &BufAccess) -> String {
        let shape = &self.decl(&a.buffer).shape;
        let mut s = String::new();
        for (i, (e, d)) in a.index.iter().zip(shape).enumerate() {
            s = if i == 0 { format!("({e})") } else { format!("({s} * {} + ({e}))", dim(d)) };
        }
        if s.is_empty() {
            "0".into()
        } else {
            s
        }
    }

    fn access(&self, a: &BufAccess) -> String {
        format!("{}[{}]", a.buffer, self.flat(a))
    }

    fn load(&self, a: &BufAccess) -> String {
        let Some(g) = a.guard else { return self.access(a) };
        let shape = &self.decl(&a.buffer).shape;
        let conds: Vec<String> = a
            .index
            .iter()
            .zip(shape)
            .filter(|(e, _)| !e.is_constant())
            .map(|(e, d)| format!("({e}) >= 0 && ({e}) < {}", dim(d)))
            .collect();
        if conds.is_empty() {
            return self.access(a);
        }
        format!("(({}) ? {} : {})", conds.join(" && "), self.access(a), float(g))
    }

    fn expr(&self, e: &Expr) -> String {
        match e {
            Expr::Const(c) => float(*c),
            Expr::Load(a) => self.load(a),
            Expr::Index(a) => format!("(float)({a})"),
            Expr::Unary(UnOp::Relu, x) => format!("fmax({}, 0.0f)", self.expr(x)),
            Expr::Unary(UnOp::Relu6, x) => format!("fmin(fmax({}, 0.0f), 6.0f)", self.expr(x)),
            Expr::Binary(BinOp::Max, a, b) => format!("fmax({}, {})", self.expr(a), self.expr(b)),
            Expr::Binary(op, a, b) => {
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                    BinOp::Max => unreachable!(),
                };
                format!("({} {sym} {})", self.expr(a), self.expr(b))
            }
            Expr::ScaleShift(x, s, t) => format!("({} * {} + {})", self.expr(x), self.expr(s), self.expr(t)),
        }
    }

    fn stmt(&self, s: &Stmt) -> String {
        match s {
            Stmt::Store { dst, value } => format!("{} = {};", self.access(dst), self.expr(value)),
            Stmt::Mac { acc, a, b } => {
                format!("{} += {} * {};", self.access(acc), self.expr(a), self.expr(b))
            }
            Stmt::ChannelRead { channel, dst } => {
                format!("{} = read_channel_intel({channel});", self.access(dst))
            }
            Stmt::ChannelWrite { channel, value } => {
                format!("write_channel_intel({channel}, {});", self.expr(value))
            }
        }
    }

    fn nodes(&self, out: &mut String, ns: &[Node], depth: usize) {
        let pad = INDENT.repeat(depth);
        for n in ns {
            match n {
                Node::Loop(l) => {
                    if l.unroll_full {
                        writeln!(out, "{pad}#pragma unroll").unwrap();
                    }
                    let v = &l.var;
                    writeln!(out, "{pad}for (int {v} = 0; {v} < {}; {v}++) {{", dim(&l.extent)).unwrap();
                    self.nodes(out, &l.body, depth + 1);
                    writeln!(out, "{pad}}}").unwrap();
                }
                Node::Stmt(s) => writeln!(out, "{pad}{}", self.stmt(s)).unwrap(),
            }
        }
    }
}

fn signature(k: &KernelIR) -> Vec<String> {
    let mut args: Vec<String> = k
        .global_buffers()
        .map(|b| match b.access {
            Access::Read => format!("__global const float *restrict {}", b.name),
            _ => format!("__global float *restrict {}", b.name),
        })
        .collect();
    args.extend(k.params.iter().map(|p| format!("const int {p}")));
    args
}

fn kernel(out: &mut String, k: &KernelIR) {
    writeln!(out, "__attribute__((max_global_work_dim(0)))").unwrap();
    if k.autorun {
        writeln!(out, "__attribute__((autorun))").unwrap();
    }
    let args = signature(k);
    if args.is_empty() {
        writeln!(out, "__kernel void {}(void)", k.id).unwrap();
    } else {
        writeln!(out, "__kernel void {}(", k.id).unwrap();
        for (i, a) in args.iter().enumerate() {
            let sep = if i + 1 == args.len() { "" } else { "," };
            writeln!(out, "{INDENT}{a}{sep}").unwrap();
        }
        writeln!(out, ")").unwrap();
    }
    writeln!(out, "{{").unwrap();
    let mut depth = 1;
    let pad = INDENT;
    for d in &k.derived {
        writeln!(out, "{pad}const int {} = {};", d.name, d.expr).unwrap();
    }
    for r in &k.requires {
        writeln!(out, "{pad}// requires {} % {} == 0", r.expr, r.divisor).unwrap();
    }
    if k.autorun {
        writeln!(out, "{pad}while (1) {{").unwrap();
        depth += 1;
    }
    let inner = INDENT.repeat(depth);
    for b in k.buffers.iter().filter(|b| b.space != MemSpace::Global) {
        let n = b.const_elems().expect("on-chip buffers are constant");
        writeln!(out, "{inner}float {}[{n}];", b.name).unwrap();
    }
    let ctx = Ctx { k };
    ctx.nodes(out, &k.body, depth);
    if k.autorun {
        writeln!(out, "{pad}}}").unwrap();
    }
    writeln!(out, "}}").unwrap();
}

/// OpenCL C (channel/autorun dialect) for every kernel of `plan`.
///
/// Channels are declared as
/// `channel float NAME __attribute__((depth(N)));` and accessed with
/// `read_channel_intel` / `write_channel_intel`. Buffers are flattened
/// row-major; guarded loads become a bounds-checked conditional.
pub fn emit_kernels(plan: &ExecutionPlan) -> Result<String, EmitError> {
    let v = structural_check(plan);
    if !v.is_empty() {
        return Err(EmitError::InvalidPlan(v.iter().map(|v| v.to_string()).collect()));
    }
    let mut out = String::new();
    writeln!(out, "// network: {}", plan.network).unwrap();
    writeln!(out, "// mode: {}", plan.mode).unwrap();
    writeln!(out, "// format_version: {EMIT_FORMAT_VERSION}").unwrap();
    if !plan.channels.is_empty() {
        writeln!(out, "#pragma OPENCL EXTENSION cl_intel_channels : enable").unwrap();
        writeln!(out).unwrap();
        for c in &plan.channels {
            writeln!(out, "channel float {} __attribute__((depth({})));", c.name, c.depth).unwrap();
        }
    }
    for k in &plan.kernels {
        writeln!(out).unwrap();
        kernel(&mut out, k);
    }
    Ok(out)
}

fn re(cell: &'static OnceLock<Regex>, pat: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pat).expect("static pattern"))
}

/// Grammar smoke check of emitted source: balanced delimiters, well-formed
/// channel declarations and kernel headers, statement terminators, and
/// channel uses that match a declaration. Returns every problem found.
pub fn smoke_check(src: &str) -> Result<(), Vec<String>> {
    static CHAN: OnceLock<Regex> = OnceLock::new();
    static KERNEL: OnceLock<Regex> = OnceLock::new();
    static USE: OnceLock<Regex> = OnceLock::new();
    static FOR: OnceLock<Regex> = OnceLock::new();
    static IDENT: OnceLock<Regex> = OnceLock::new();
    let chan = re(&CHAN, r"^channel float ([A-Za-z_]\w*) __attribute__\(\(depth\((\d+)\)\)\);$");
    let kernel = re(&KERNEL, r"^__kernel void ([A-Za-z_]\w*)\((void\))?$");
    let usage = re(&USE, r"(read|write)_channel_intel\(([A-Za-z_]\w*)");
    let for_ = re(&FOR, r"^for \(int ([A-Za-z_]\w*) = 0; ([A-Za-z_]\w*) < ([A-Za-z_]\w*|\d+); ([A-Za-z_]\w*)\+\+\) \{$");
    let ident = re(&IDENT, r"^[A-Za-z_]\w*$");
    static NONFINITE: OnceLock<Regex> = OnceLock::new();
    let nonfinite = re(&NONFINITE, r"\b(NaN|nan|inf)\b");

    let mut errs = Vec::new();
    let mut stack: Vec<(char, usize)> = Vec::new();
    for (n, line) in src.lines().enumerate() {
        let t = line.trim();
        if t.starts_with("//") {
            continue;
        }
        for c in t.chars() {
            match c {
                '(' | '{' | '[' => stack.push((c, n + 1)),
                ')' | '}' | ']' => {
                    let want = match c {
                        ')' => '(',
                        '}' => '{',
                        _ => '[',
                    };
                    match stack.pop() {
                        Some((o, _)) if o == want => {}
                        _ => errs.push(format!("line {}: unbalanced '{c}'", n + 1)),
                    }
                }
                _ => {}
            }
        }
    }
    for (c, line) in stack {
        errs.push(format!("line {line}: unclosed '{c}'"));
    }

    let mut declared = BTreeSet::new();
    let mut in_args = false;
    for (n, line) in src.lines().enumerate() {
        let t = line.trim();
        let at = n + 1;
        if t.is_empty() || t.starts_with("//") || t.starts_with("#pragma") || t.starts_with("__attribute__") {
            continue;
        }
        if t.starts_with("channel ") {
            match chan.captures(t) {
                Some(c) => {
                    if c[2].parse::<u64>().map_or(true, |d| d == 0) {
                        errs.push(format!("line {at}: channel depth must be positive"));
                    }
                    declared.insert(c[1].to_string());
                }
                None => errs.push(format!("line {at}: malformed channel declaration")),
            }
            continue;
        }
        if t.starts_with("__kernel") {
            match kernel.captures(t) {
                Some(c) => in_args = c.get(2).is_none(),
                None => errs.push(format!("line {at}: malformed kernel header")),
            }
            continue;
        }
        if in_args {
            if t == ")" {
                in_args = false;
                continue;
            }
            let arg = t.trim_end_matches(',');
            let name = arg.rsplit(' ').next().unwrap_or("");
            let ok = (arg.starts_with("__global const float *restrict ")
                || arg.starts_with("__global float *restrict ")
                || arg.starts_with("const int "))
                && ident.is_match(name);
            if !ok {
                errs.push(format!("line {at}: malformed kernel argument '{arg}'"));
            }
            continue;
        }
        if t.starts_with("for ") {
            match for_.captures(t) {
                Some(c) if c[1] == c[2] && c[2] == c[4] => {}
                _ => errs.push(format!("line {at}: malformed loop header")),
            }
            continue;
        }
        if !(t.ends_with(';') || t == "{" || t == "}" || t == "while (1) {") {
            errs.push(format!("line {at}: missing terminator"));
        }
        if nonfinite.is_match(t) {
            errs.push(format!("line {at}: non-finite literal"));
        }
    }
    for c in usage.captures_iter(src) {
        if !declared.contains(&c[2]) {
            errs.push(format!("channel '{}' used but not declared", &c[2]));
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}
