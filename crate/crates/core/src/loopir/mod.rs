//! Single-work-item loop-nest kernel IR, per-layer lowering and the reference
//! interpreter used as the correctness oracle for every transformation.

mod affine;
mod check;
mod interp;
mod lower;
mod print;
mod sim;
mod tensor;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::netdef::{LayerSpec, Shape};
use crate::xform::XformStep;

pub use affine::{AffineExpr, SymExpr};
pub use check::{check_kernel, structural_check, Violation};
pub use interp::{interpret_kernel, synth_kernel_inputs, ExecStats, InterpOptions, KernelOutput};
pub use lower::{layer_buffer_map, layer_params, lower_layer, lower_layer_symbolic, specialize};
pub use print::print_kernel;
pub use sim::{interpret_plan, PlanOutput, DEFAULT_MAX_STEPS};
pub use tensor::{
    compare_tensors, read_tensor, synth_input, synth_tensor, write_tensor, Tensor, TensorRole,
};

pub type Bindings = BTreeMap<String, i64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("unsupported layer kind '{0}'")]
    UnsupportedKind(String),
    #[error("unbound symbol '{0}'")]
    UnboundSym(String),
    #[error("kernel '{kernel}': index {index:?} out of bounds for buffer '{buffer}' {dims:?}")]
    OutOfBoundsIndex { kernel: String, buffer: String, index: Vec<i64>, dims: Vec<usize> },
    #[error("kernel '{kernel}': {detail}")]
    Invalid { kernel: String, detail: String },
    #[error("kernel '{kernel}': binding violates requirement: {detail}")]
    BindingViolation { kernel: String, detail: String },
    #[error("missing tensor '{0}'")]
    MissingTensor(String),
    #[error("tensor '{name}' has {got} elements, buffer needs {expected}")]
    TensorSize { name: String, expected: usize, got: usize },
    #[error("deadlock: kernels {blocked:?} all blocked on channels")]
    DeadlockDetected { blocked: Vec<String> },
    #[error("step budget of {0} exceeded")]
    StepBudgetExceeded(u64),
    #[error("invalid plan: {0:?}")]
    InvalidPlan(Vec<String>),
    #[error("tensor I/O: {0}")]
    Io(String),
}

/// A loop extent or buffer dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Dim {
    Const(usize),
    Sym(String),
}

impl Dim {
    pub fn sym(name: &str) -> Self {
        Dim::Sym(name.to_string())
    }

    pub fn as_const(&self) -> Option<usize> {
        match self {
            Dim::Const(n) => Some(*n),
            Dim::Sym(_) => None,
        }
    }

    pub fn resolve(&self, env: &Bindings) -> Result<usize, IrError> {
        match self {
            Dim::Const(n) => Ok(*n),
            Dim::Sym(s) => env
                .get(s)
                .map(|&v| v.max(0) as usize)
                .ok_or_else(|| IrError::UnboundSym(s.clone())),
        }
    }

    pub fn to_affine(&self) -> AffineExpr {
        match self {
            Dim::Const(n) => AffineExpr::constant(*n as i64),
            Dim::Sym(s) => AffineExpr::var(s),
        }
    }

    pub fn bind(&self, env: &Bindings) -> Dim {
        match self {
            Dim::Sym(s) => env.get(s).map(|&v| Dim::Const(v as usize)).unwrap_or_else(|| self.clone()),
            c => c.clone(),
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Const(n) => write!(f, "{n}"),
            Dim::Sym(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MemSpace {
    Global,
    Local,
    Register,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Access {
    Read,
    Write,
    ReadWrite,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferDecl {
    pub name: String,
    pub space: MemSpace,
    pub shape: Vec<Dim>,
    pub access: Access,
}

impl BufferDecl {
    pub fn new(name: &str, space: MemSpace, shape: Vec<Dim>, access: Access) -> Self {
        BufferDecl { name: name.to_string(), space, shape, access }
    }

    pub fn const_elems(&self) -> Option<usize> {
        self.shape.iter().map(Dim::as_const).product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelDecl {
    pub name: String,
    pub depth: usize,
    pub producer: String,
    pub consumer: String,
}

/// A buffer element reference. `guard` makes an out-of-range index read the
/// given value instead of failing (implicit zero padding and the like).
#[derive(Debug, Clone, PartialEq)]
pub struct BufAccess {
    pub buffer: String,
    pub index: Vec<AffineExpr>,
    pub guard: Option<f32>,
}

impl BufAccess {
    pub fn new(buffer: &str, index: Vec<AffineExpr>) -> Self {
        BufAccess { buffer: buffer.to_string(), index, guard: None }
    }

    pub fn guarded(mut self, fallback: f32) -> Self {
        self.guard = Some(fallback);
        self
    }

    /// Scalar register slot `name[0]`.
    pub fn scalar(buffer: &str) -> Self {
        BufAccess::new(buffer, vec![AffineExpr::constant(0)])
    }

    pub fn uses_var(&self, v: &str) -> bool {
        self.index.iter().any(|e| e.uses(v))
    }

    fn map_index(&mut self, f: &mut impl FnMut(&AffineExpr) -> AffineExpr) {
        for e in &mut self.index {
            *e = f(e);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnOp {
    Relu,
    Relu6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Mul,
    Max,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f32),
    Load(BufAccess),
    /// An integer-valued affine expression converted to float.
    Index(AffineExpr),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    /// `x * scale + shift`: a folded batchnorm.
    ScaleShift(Box<Expr>, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn load(a: BufAccess) -> Self {
        Expr::Load(a)
    }

    pub fn unary(op: UnOp, x: Expr) -> Self {
        Expr::Unary(op, Box::new(x))
    }

    pub fn binary(op: BinOp, a: Expr, b: Expr) -> Self {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn scale_shift(x: Expr, s: Expr, t: Expr) -> Self {
        Expr::ScaleShift(Box::new(x), Box::new(s), Box::new(t))
    }

    pub fn visit_loads<'a>(&'a self, f: &mut impl FnMut(&'a BufAccess)) {
        match self {
            Expr::Const(_) | Expr::Index(_) => {}
            Expr::Load(a) => f(a),
            Expr::Unary(_, x) => x.visit_loads(f),
            Expr::Binary(_, a, b) => {
                a.visit_loads(f);
                b.visit_loads(f);
            }
            Expr::ScaleShift(x, s, t) => {
                x.visit_loads(f);
                s.visit_loads(f);
                t.visit_loads(f);
            }
        }
    }

    pub fn visit_loads_mut(&mut self, f: &mut impl FnMut(&mut BufAccess)) {
        match self {
            Expr::Const(_) | Expr::Index(_) => {}
            Expr::Load(a) => f(a),
            Expr::Unary(_, x) => x.visit_loads_mut(f),
            Expr::Binary(_, a, b) => {
                a.visit_loads_mut(f);
                b.visit_loads_mut(f);
            }
            Expr::ScaleShift(x, s, t) => {
                x.visit_loads_mut(f);
                s.visit_loads_mut(f);
                t.visit_loads_mut(f);
            }
        }
    }

    pub fn map_affine(&mut self, f: &mut impl FnMut(&AffineExpr) -> AffineExpr) {
        match self {
            Expr::Const(_) => {}
            Expr::Index(e) => *e = f(e),
            Expr::Load(a) => a.map_index(f),
            Expr::Unary(_, x) => x.map_affine(f),
            Expr::Binary(_, a, b) => {
                a.map_affine(f);
                b.map_affine(f);
            }
            Expr::ScaleShift(x, s, t) => {
                x.map_affine(f);
                s.map_affine(f);
                t.map_affine(f);
            }
        }
    }

    /// Arithmetic operations performed per evaluation.
    pub fn op_count(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Load(_) | Expr::Index(_) => 0,
            Expr::Unary(_, x) => 1 + x.op_count(),
            Expr::Binary(_, a, b) => 1 + a.op_count() + b.op_count(),
            Expr::ScaleShift(x, s, t) => 1 + x.op_count() + s.op_count() + t.op_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stmt {
    Store { dst: BufAccess, value: Expr },
    /// `acc += a * b`.
    Mac { acc: BufAccess, a: Expr, b: Expr },
    ChannelRead { channel: String, dst: BufAccess },
    ChannelWrite { channel: String, value: Expr },
}

impl Stmt {
    /// Every buffer read, including the accumulator read of a `Mac`.
    pub fn reads(&self) -> Vec<&BufAccess> {
        let mut out = Vec::new();
        match self {
            Stmt::Store { value, .. } => value.visit_loads(&mut |a| out.push(a)),
            Stmt::Mac { acc, a, b } => {
                out.push(acc);
                a.visit_loads(&mut |x| out.push(x));
                b.visit_loads(&mut |x| out.push(x));
            }
            Stmt::ChannelRead { .. } => {}
            Stmt::ChannelWrite { value, .. } => value.visit_loads(&mut |a| out.push(a)),
        }
        out
    }

    pub fn writes(&self) -> Option<&BufAccess> {
        match self {
            Stmt::Store { dst, .. } | Stmt::ChannelRead { dst, .. } => Some(dst),
            Stmt::Mac { acc, .. } => Some(acc),
            Stmt::ChannelWrite { .. } => None,
        }
    }

    pub fn visit_accesses_mut(&mut self, f: &mut impl FnMut(&mut BufAccess)) {
        match self {
            Stmt::Store { dst, value } => {
                f(dst);
                value.visit_loads_mut(f);
            }
            Stmt::Mac { acc, a, b } => {
                f(acc);
                a.visit_loads_mut(f);
                b.visit_loads_mut(f);
            }
            Stmt::ChannelRead { dst, .. } => f(dst),
            Stmt::ChannelWrite { value, .. } => value.visit_loads_mut(f),
        }
    }

    pub fn map_affine(&mut self, f: &mut impl FnMut(&AffineExpr) -> AffineExpr) {
        match self {
            Stmt::Store { dst, value } => {
                dst.map_index(f);
                value.map_affine(f);
            }
            Stmt::Mac { acc, a, b } => {
                acc.map_index(f);
                a.map_affine(f);
                b.map_affine(f);
            }
            Stmt::ChannelRead { dst, .. } => dst.map_index(f),
            Stmt::ChannelWrite { value, .. } => value.map_affine(f),
        }
    }

    pub fn is_mac(&self) -> bool {
        matches!(self, Stmt::Mac { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopNode {
    pub var: String,
    pub extent: Dim,
    pub unroll_full: bool,
    pub body: Vec<Node>,
}

impl LoopNode {
    pub fn new(var: &str, extent: Dim, body: Vec<Node>) -> Self {
        LoopNode { var: var.to_string(), extent, unroll_full: false, body }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Loop(LoopNode),
    Stmt(Stmt),
}

impl Node {
    pub fn for_loop(var: &str, extent: Dim, body: Vec<Node>) -> Self {
        Node::Loop(LoopNode::new(var, extent, body))
    }
}

/// A derived integer symbol, evaluated in order after the parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivedSym {
    pub name: String,
    pub expr: SymExpr,
}

/// `expr` must be divisible by `divisor` under every binding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Requirement {
    pub expr: SymExpr,
    pub divisor: i64,
}

/// Where a kernel came from: enough to re-lower it.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelOrigin {
    pub layer: LayerSpec,
    pub input_shapes: Vec<Shape>,
    /// Fused elementwise post-ops, in application order.
    pub posts: Vec<LayerSpec>,
    /// Formal buffer name → global tensor name.
    pub buffer_map: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelIR {
    pub id: String,
    pub params: Vec<String>,
    pub derived: Vec<DerivedSym>,
    pub requires: Vec<Requirement>,
    pub buffers: Vec<BufferDecl>,
    pub channels_in: Vec<String>,
    pub channels_out: Vec<String>,
    pub body: Vec<Node>,
    pub autorun: bool,
    pub origin: Option<KernelOrigin>,
    pub history: Vec<XformStep>,
}

impl KernelIR {
    pub fn new(id: &str) -> Self {
        KernelIR {
            id: id.to_string(),
            params: Vec::new(),
            derived: Vec::new(),
            requires: Vec::new(),
            buffers: Vec::new(),
            channels_in: Vec::new(),
            channels_out: Vec::new(),
            body: Vec::new(),
            autorun: false,
            origin: None,
            history: Vec::new(),
        }
    }

    pub fn buffer(&self, name: &str) -> Option<&BufferDecl> {
        self.buffers.iter().find(|b| b.name == name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut BufferDecl> {
        self.buffers.iter_mut().find(|b| b.name == name)
    }

    pub fn global_buffers(&self) -> impl Iterator<Item = &BufferDecl> {
        self.buffers.iter().filter(|b| b.space == MemSpace::Global)
    }

    pub fn is_parameterized(&self) -> bool {
        !self.params.is_empty()
    }

    /// Calls `f(stmt, enclosing loops outermost first)` for every statement.
    pub fn visit_stmts<'a>(&'a self, f: &mut impl FnMut(&'a Stmt, &[&'a LoopNode])) {
        fn go<'a>(
            nodes: &'a [Node],
            stack: &mut Vec<&'a LoopNode>,
            f: &mut impl FnMut(&'a Stmt, &[&'a LoopNode]),
        ) {
            for n in nodes {
                match n {
                    Node::Stmt(s) => f(s, stack),
                    Node::Loop(l) => {
                        stack.push(l);
                        go(&l.body, stack, f);
                        stack.pop();
                    }
                }
            }
        }
        go(&self.body, &mut Vec::new(), f);
    }

    pub fn visit_stmts_mut(&mut self, f: &mut impl FnMut(&mut Stmt)) {
        fn go(nodes: &mut [Node], f: &mut impl FnMut(&mut Stmt)) {
            for n in nodes {
                match n {
                    Node::Stmt(s) => f(s),
                    Node::Loop(l) => go(&mut l.body, f),
                }
            }
        }
        go(&mut self.body, f);
    }

    /// Calls `f(loop, depth)` for every loop in pre-order.
    pub fn visit_loops<'a>(&'a self, f: &mut impl FnMut(&'a LoopNode, usize)) {
        fn go<'a>(nodes: &'a [Node], depth: usize, f: &mut impl FnMut(&'a LoopNode, usize)) {
            for n in nodes {
                if let Node::Loop(l) = n {
                    f(l, depth);
                    go(&l.body, depth + 1, f);
                }
            }
        }
        go(&self.body, 0, f);
    }

    pub fn visit_loops_mut(&mut self, f: &mut impl FnMut(&mut LoopNode)) {
        fn go(nodes: &mut [Node], f: &mut impl FnMut(&mut LoopNode)) {
            for n in nodes {
                if let Node::Loop(l) = n {
                    f(l);
                    go(&mut l.body, f);
                }
            }
        }
        go(&mut self.body, f);
    }

    pub fn loop_vars(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_loops(&mut |l, _| out.push(l.var.clone()));
        out
    }

    pub fn find_loop(&self, var: &str) -> Option<&LoopNode> {
        let mut found = None;
        self.visit_loops(&mut |l, _| {
            if found.is_none() && l.var == var {
                found = Some(l);
            }
        });
        found
    }

    /// Number of `Mac` statements in the (unreplicated) body.
    pub fn mac_statements(&self) -> usize {
        let mut n = 0;
        self.visit_stmts(&mut |s, _| n += s.is_mac() as usize);
        n
    }

    pub fn stmt_count(&self) -> usize {
        let mut n = 0;
        self.visit_stmts(&mut |_, _| n += 1);
        n
    }

    /// Renames a buffer everywhere, including its declaration.
    pub fn rename_buffer(&mut self, from: &str, to: &str) {
        if let Some(b) = self.buffer_mut(from) {
            b.name = to.to_string();
        }
        self.visit_stmts_mut(&mut |s| {
            s.visit_accesses_mut(&mut |a| {
                if a.buffer == from {
                    a.buffer = to.to_string();
                }
            })
        });
        if let Some(o) = &mut self.origin {
            if let Some(t) = o.buffer_map.remove(from) {
                o.buffer_map.insert(to.to_string(), t);
            }
        }
    }

    /// Recomputes each buffer's access mode from its uses.
    pub fn refresh_access(&mut self) {
        let mut reads: BTreeMap<String, bool> = BTreeMap::new();
        let mut writes: BTreeMap<String, bool> = BTreeMap::new();
        self.visit_stmts(&mut |s, _| {
            for r in s.reads() {
                reads.insert(r.buffer.clone(), true);
            }
            if let Some(w) = s.writes() {
                writes.insert(w.buffer.clone(), true);
            }
        });
        for b in &mut self.buffers {
            let r = reads.contains_key(&b.name);
            let w = writes.contains_key(&b.name);
            b.access = match (r, w) {
                (true, true) => Access::ReadWrite,
                (false, true) => Access::Write,
                _ => Access::Read,
            };
        }
    }

    /// Drops declarations no statement references.
    pub fn prune_buffers(&mut self) {
        let mut used: BTreeMap<String, ()> = BTreeMap::new();
        self.visit_stmts(&mut |s, _| {
            for r in s.reads() {
                used.insert(r.buffer.clone(), ());
            }
            if let Some(w) = s.writes() {
                used.insert(w.buffer.clone(), ());
            }
        });
        self.buffers.retain(|b| used.contains_key(&b.name));
        if let Some(o) = &mut self.origin {
            o.buffer_map.retain(|k, _| used.contains_key(k));
        }
    }

    /// Parameter values plus derived symbols, after checking requirements.
    pub fn resolve_env(&self, bindings: &Bindings) -> Result<Bindings, IrError> {
        let mut env = Bindings::new();
        for p in &self.params {
            let v = *bindings.get(p).ok_or_else(|| IrError::UnboundSym(p.clone()))?;
            env.insert(p.clone(), v);
        }
        for d in &self.derived {
            let v = d.expr.eval(&env).map_err(IrError::UnboundSym)?;
            env.insert(d.name.clone(), v);
        }
        for r in &self.requires {
            let v = r.expr.eval(&env).map_err(IrError::UnboundSym)?;
            if v.rem_euclid(r.divisor) != 0 {
                return Err(IrError::BindingViolation {
                    kernel: self.id.clone(),
                    detail: format!("{} = {v} is not divisible by {}", r.expr, r.divisor),
                });
            }
        }
        Ok(env)
    }

    /// Symbols a statement index may mention besides loop variables.
    pub fn symbol_names(&self) -> Vec<String> {
        self.params
            .iter()
            .cloned()
            .chain(self.derived.iter().map(|d| d.name.clone()))
            .collect()
    }
}

/// Smallest power of two `>= n` (and at least 1).
pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}
