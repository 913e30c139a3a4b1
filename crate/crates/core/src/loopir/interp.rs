use std::collections::BTreeMap;

use super::tensor::{synth_tensor, TensorRole};
use super::{
    AffineExpr, BinOp, BufAccess, Bindings, Expr, IrError, KernelIR, LoopNode, MemSpace, Node,
    Stmt, Tensor, UnOp, Access,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterpOptions {
    /// Models `-fp-relaxed -fpc`: fused multiply-adds and tree-reduced
    /// unrolled accumulations.
    pub relaxed: bool,
    pub max_steps: u64,
}

impl Default for InterpOptions {
    fn default() -> Self {
        InterpOptions { relaxed: false, max_steps: super::DEFAULT_MAX_STEPS }
    }
}

/// Dynamic operation counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecStats {
    pub macs: u64,
    pub elem_ops: u64,
    pub steps: u64,
}

impl ExecStats {
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.elem_ops
    }

    pub fn add(&mut self, o: &ExecStats) {
        self.macs += o.macs;
        self.elem_ops += o.elem_ops;
        self.steps += o.steps;
    }
}

#[derive(Debug, Clone)]
pub struct KernelOutput {
    /// Written Global buffers, by formal name.
    pub outputs: BTreeMap<String, Tensor>,
    pub stats: ExecStats,
}

#[derive(Debug, Clone)]
struct CIndex {
    constant: i64,
    terms: Vec<(usize, i64)>,
}

impl CIndex {
    #[inline]
    fn eval(&self, vars: &[i64]) -> i64 {
        let mut v = self.constant;
        for &(s, c) in &self.terms {
            v += c * vars[s];
        }
        v
    }
}

#[derive(Debug, Clone)]
struct CAccess {
    buf: usize,
    index: Vec<CIndex>,
    guard: Option<f32>,
}

#[derive(Debug, Clone)]
enum CExpr {
    Const(f32),
    Load(CAccess),
    Index(CIndex),
    Unary(UnOp, Box<CExpr>),
    Binary(BinOp, Box<CExpr>, Box<CExpr>),
    ScaleShift(Box<CExpr>, Box<CExpr>, Box<CExpr>),
}

#[derive(Debug, Clone)]
enum Instr {
    Loop { slot: usize, extent: i64, end: usize },
    Next { slot: usize, extent: i64, body: usize },
    Store { dst: CAccess, value: CExpr },
    Mac { acc: CAccess, a: CExpr, b: CExpr },
    /// A fully unrolled Mac-only nest reduced as a balanced tree.
    MacTree { loops: Vec<(usize, i64)>, acc: CAccess, a: CExpr, b: CExpr },
    Read { chan: usize, dst: CAccess },
    Write { chan: usize, value: CExpr },
}

/// A kernel compiled for one set of bindings.
#[derive(Debug, Clone)]
pub(crate) struct Program {
    pub kernel: String,
    instrs: Vec<Instr>,
    slots: usize,
    pub buf_names: Vec<String>,
    pub buf_dims: Vec<Vec<usize>>,
}

struct Compiler<'a> {
    env: &'a Bindings,
    slots: BTreeMap<String, usize>,
    bufs: BTreeMap<String, usize>,
    chans: &'a BTreeMap<String, usize>,
    relaxed: bool,
    kernel: &'a str,
    instrs: Vec<Instr>,
}

impl Compiler<'_> {
    fn index(&self, e: &AffineExpr) -> Result<CIndex, IrError> {
        let mut out = CIndex { constant: e.constant, terms: Vec::new() };
        for (n, &c) in &e.terms {
            if let Some(&s) = self.slots.get(n) {
                out.terms.push((s, c));
            } else if let Some(&v) = self.env.get(n) {
                out.constant += c * v;
            } else {
                return Err(IrError::UnboundSym(n.clone()));
            }
        }
        Ok(out)
    }

    fn access(&self, a: &BufAccess) -> Result<CAccess, IrError> {
        let buf = *self.bufs.get(&a.buffer).ok_or_else(|| IrError::Invalid {
            kernel: self.kernel.to_string(),
            detail: format!("undeclared buffer '{}'", a.buffer),
        })?;
        Ok(CAccess {
            buf,
            index: a.index.iter().map(|e| self.index(e)).collect::<Result<_, _>>()?,
            guard: a.guard,
        })
    }

    fn expr(&self, e: &Expr) -> Result<CExpr, IrError> {
        Ok(match e {
            Expr::Const(c) => CExpr::Const(*c),
            Expr::Load(a) => CExpr::Load(self.access(a)?),
            Expr::Index(a) => CExpr::Index(self.index(a)?),
            Expr::Unary(op, x) => CExpr::Unary(*op, Box::new(self.expr(x)?)),
            Expr::Binary(op, a, b) => {
                CExpr::Binary(*op, Box::new(self.expr(a)?), Box::new(self.expr(b)?))
            }
            Expr::ScaleShift(x, s, t) => CExpr::ScaleShift(
                Box::new(self.expr(x)?),
                Box::new(self.expr(s)?),
                Box::new(self.expr(t)?),
            ),
        })
    }

    fn chan(&self, name: &str) -> Result<usize, IrError> {
        self.chans.get(name).copied().ok_or_else(|| IrError::Invalid {
            kernel: self.kernel.to_string(),
            detail: format!("unbound channel '{name}'"),
        })
    }

    fn slot(&mut self, var: &str) -> usize {
        let n = self.slots.len();
        *self.slots.entry(var.to_string()).or_insert(n)
    }

    fn extent(&self, l: &LoopNode) -> Result<i64, IrError> {
        Ok(l.extent.resolve(self.env)? as i64)
    }

    /// `Some((loops, mac))` if `l` is a chain of unrolled loops ending in a
    /// single Mac whose accumulator does not depend on the chain.
    fn mac_chain(l: &LoopNode) -> Option<(Vec<&LoopNode>, &Stmt)> {
        let mut chain = vec![l];
        let mut cur = l;
        loop {
            if !cur.unroll_full || cur.body.len() != 1 {
                return None;
            }
            match &cur.body[0] {
                Node::Loop(inner) => {
                    chain.push(inner);
                    cur = inner;
                }
                Node::Stmt(s @ Stmt::Mac { acc, .. }) => {
                    if chain.iter().any(|c| acc.uses_var(&c.var)) {
                        return None;
                    }
                    return Some((chain, s));
                }
                Node::Stmt(_) => return None,
            }
        }
    }

    fn nodes(&mut self, nodes: &[Node]) -> Result<(), IrError> {
        for n in nodes {
            match n {
                Node::Stmt(s) => {
                    let ins = self.stmt(s)?;
                    self.instrs.push(ins);
                }
                Node::Loop(l) => {
                    if self.relaxed {
                        if let Some((chain, Stmt::Mac { acc, a, b })) = Self::mac_chain(l) {
                            let mut loops = Vec::new();
                            for c in &chain {
                                let e = self.extent(c)?;
                                loops.push((self.slot(&c.var), e));
                            }
                            let ins = Instr::MacTree {
                                loops,
                                acc: self.access(acc)?,
                                a: self.expr(a)?,
                                b: self.expr(b)?,
                            };
                            self.instrs.push(ins);
                            continue;
                        }
                    }
                    let slot = self.slot(&l.var);
                    let extent = self.extent(l)?;
                    let at = self.instrs.len();
                    self.instrs.push(Instr::Loop { slot, extent, end: 0 });
                    self.nodes(&l.body)?;
                    self.instrs.push(Instr::Next { slot, extent, body: at + 1 });
                    let end = self.instrs.len();
                    if let Instr::Loop { end: e, .. } = &mut self.instrs[at] {
                        *e = end;
                    }
                }
            }
        }
        Ok(())
    }

    fn stmt(&self, s: &Stmt) -> Result<Instr, IrError> {
        Ok(match s {
            Stmt::Store { dst, value } => {
                Instr::Store { dst: self.access(dst)?, value: self.expr(value)? }
            }
            Stmt::Mac { acc, a, b } => {
                Instr::Mac { acc: self.access(acc)?, a: self.expr(a)?, b: self.expr(b)? }
            }
            Stmt::ChannelRead { channel, dst } => {
                Instr::Read { chan: self.chan(channel)?, dst: self.access(dst)? }
            }
            Stmt::ChannelWrite { channel, value } => {
                Instr::Write { chan: self.chan(channel)?, value: self.expr(value)? }
            }
        })
    }
}

impl Program {
    /// Compiles `k` under `bindings`; `chans` maps the kernel's channel names
    /// to simulator channel indices.
    pub fn compile(
        k: &KernelIR,
        bindings: &Bindings,
        chans: &BTreeMap<String, usize>,
        relaxed: bool,
    ) -> Result<Program, IrError> {
        let env = k.resolve_env(bindings)?;
        let mut bufs = BTreeMap::new();
        let mut buf_dims = Vec::new();
        for (i, b) in k.buffers.iter().enumerate() {
            bufs.insert(b.name.clone(), i);
            buf_dims.push(b.shape.iter().map(|d| d.resolve(&env)).collect::<Result<Vec<_>, _>>()?);
        }
        let mut c = Compiler {
            env: &env,
            slots: BTreeMap::new(),
            bufs,
            chans,
            relaxed,
            kernel: &k.id,
            instrs: Vec::new(),
        };
        c.nodes(&k.body)?;
        Ok(Program {
            kernel: k.id.clone(),
            slots: c.slots.len(),
            instrs: c.instrs,
            buf_names: k.buffers.iter().map(|b| b.name.clone()).collect(),
            buf_dims,
        })
    }
}

/// Non-blocking channel endpoint used by [`Machine::run`].
pub(crate) trait ChannelIo {
    fn try_read(&mut self, chan: usize) -> Option<f32>;
    fn try_write(&mut self, chan: usize, v: f32) -> bool;
}

/// For kernels without channels: every channel op blocks.
pub(crate) struct NoChannels;

impl ChannelIo for NoChannels {
    fn try_read(&mut self, _: usize) -> Option<f32> {
        None
    }
    fn try_write(&mut self, _: usize, _: f32) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Status {
    Done,
    Blocked,
}

/// Resumable execution state of one program.
pub(crate) struct Machine {
    pub prog: Program,
    pc: usize,
    vars: Vec<i64>,
    pub bufs: Vec<Vec<f32>>,
    pending_write: Option<f32>,
    pub stats: ExecStats,
    relaxed: bool,
}

impl Machine {
    pub fn new(prog: Program, relaxed: bool) -> Self {
        let bufs = prog.buf_dims.iter().map(|d| vec![0.0; d.iter().product()]).collect();
        Machine {
            vars: vec![0; prog.slots],
            prog,
            pc: 0,
            bufs,
            pending_write: None,
            stats: ExecStats::default(),
            relaxed,
        }
    }

    pub fn is_done(&self) -> bool {
        self.pc >= self.prog.instrs.len()
    }

    /// Loads buffer `name` from `t`.
    pub fn bind(&mut self, name: &str, t: &Tensor) -> Result<(), IrError> {
        let i = self.prog.buf_names.iter().position(|n| n == name).ok_or_else(|| {
            IrError::Invalid { kernel: self.prog.kernel.clone(), detail: format!("no buffer '{name}'") }
        })?;
        if self.bufs[i].len() != t.data.len() {
            return Err(IrError::TensorSize {
                name: name.to_string(),
                expected: self.bufs[i].len(),
                got: t.data.len(),
            });
        }
        self.bufs[i].copy_from_slice(&t.data);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let i = self.prog.buf_names.iter().position(|n| n == name)?;
        Some(Tensor { shape: self.prog.buf_dims[i].clone(), data: self.bufs[i].clone() })
    }

    fn flat(&self, a: &CAccess) -> Result<Option<usize>, IrError> {
        let dims = &self.prog.buf_dims[a.buf];
        if dims.len() != a.index.len() {
            return Err(IrError::Invalid {
                kernel: self.prog.kernel.clone(),
                detail: format!(
                    "buffer '{}' has rank {}, indexed with {}",
                    self.prog.buf_names[a.buf],
                    dims.len(),
                    a.index.len()
                ),
            });
        }
        let mut flat = 0usize;
        let mut oob = false;
        for (e, &d) in a.index.iter().zip(dims) {
            let v = e.eval(&self.vars);
            if v < 0 || v as usize >= d {
                oob = true;
                break;
            }
            flat = flat * d + v as usize;
        }
        if !oob {
            return Ok(Some(flat));
        }
        if a.guard.is_some() {
            return Ok(None);
        }
        Err(IrError::OutOfBoundsIndex {
            kernel: self.prog.kernel.clone(),
            buffer: self.prog.buf_names[a.buf].clone(),
            index: a.index.iter().map(|e| e.eval(&self.vars)).collect(),
            dims: dims.clone(),
        })
    }

    fn load(&self, a: &CAccess) -> Result<f32, IrError> {
        Ok(match self.flat(a)? {
            Some(i) => self.bufs[a.buf][i],
            None => a.guard.expect("guarded"),
        })
    }

    fn store(&mut self, a: &CAccess, v: f32) -> Result<(), IrError> {
        match self.flat(a)? {
            Some(i) => {
                self.bufs[a.buf][i] = v;
                Ok(())
            }
            // A guarded store outside the buffer is dropped.
            None => Ok(()),
        }
    }

    fn eval(&mut self, e: &CExpr) -> Result<f32, IrError> {
        Ok(match e {
            CExpr::Const(c) => *c,
            CExpr::Load(a) => self.load(a)?,
            CExpr::Index(i) => i.eval(&self.vars) as f32,
            CExpr::Unary(op, x) => {
                let x = self.eval(x)?;
                self.stats.elem_ops += 1;
                match op {
                    UnOp::Relu => x.max(0.0),
                    UnOp::Relu6 => x.clamp(0.0, 6.0),
                }
            }
            CExpr::Binary(op, a, b) => {
                let a = self.eval(a)?;
                let b = self.eval(b)?;
                self.stats.elem_ops += 1;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Mul => a * b,
                    BinOp::Max => a.max(b),
                    BinOp::Div => a / b,
                }
            }
            CExpr::ScaleShift(x, s, t) => {
                let x = self.eval(x)?;
                let s = self.eval(s)?;
                let t = self.eval(t)?;
                self.stats.elem_ops += 1;
                if self.relaxed {
                    x.mul_add(s, t)
                } else {
                    x * s + t
                }
            }
        })
    }

    fn mac_tree(&mut self, loops: &[(usize, i64)], acc: &CAccess, a: &CExpr, b: &CExpr) -> Result<(), IrError> {
        let mut products = Vec::new();
        if loops.iter().all(|&(_, e)| e > 0) {
            for &(s, _) in loops {
                self.vars[s] = 0;
            }
            'outer: loop {
                let x = self.eval(a)?;
                let y = self.eval(b)?;
                products.push(x * y);
                for &(s, e) in loops.iter().rev() {
                    self.vars[s] += 1;
                    if self.vars[s] < e {
                        continue 'outer;
                    }
                    self.vars[s] = 0;
                }
                break;
            }
        }
        self.stats.macs += products.len() as u64;
        while products.len() > 1 {
            let next: Vec<f32> = products
                .chunks(2)
                .map(|c| if c.len() == 2 { c[0] + c[1] } else { c[0] })
                .collect();
            products = next;
        }
        let sum = products.first().copied().unwrap_or(0.0);
        let cur = self.load(acc)?;
        self.store(acc, cur + sum)
    }

    /// Runs until completion or until a channel operation blocks.
    pub fn run(&mut self, io: &mut dyn ChannelIo, budget: &mut u64) -> Result<Status, IrError> {
        let instrs = std::mem::take(&mut self.prog.instrs);
        let r = self.run_inner(&instrs, io, budget);
        self.prog.instrs = instrs;
        r
    }

    fn run_inner(
        &mut self,
        instrs: &[Instr],
        io: &mut dyn ChannelIo,
        budget: &mut u64,
    ) -> Result<Status, IrError> {
        while self.pc < instrs.len() {
            if *budget == 0 {
                return Err(IrError::StepBudgetExceeded(self.stats.steps));
            }
            *budget -= 1;
            self.stats.steps += 1;
            match &instrs[self.pc] {
                Instr::Loop { slot, extent, end } => {
                    if *extent <= 0 {
                        self.pc = *end;
                        continue;
                    }
                    self.vars[*slot] = 0;
                }
                Instr::Next { slot, extent, body } => {
                    self.vars[*slot] += 1;
                    if self.vars[*slot] < *extent {
                        self.pc = *body;
                        continue;
                    }
                }
                Instr::Store { dst, value } => {
                    let v = self.eval(value)?;
                    self.store(dst, v)?;
                }
                Instr::Mac { acc, a, b } => {
                    let x = self.eval(a)?;
                    let y = self.eval(b)?;
                    let cur = self.load(acc)?;
                    self.stats.macs += 1;
                    let v = if self.relaxed { x.mul_add(y, cur) } else { cur + x * y };
                    self.store(acc, v)?;
                }
                Instr::MacTree { loops, acc, a, b } => self.mac_tree(loops, acc, a, b)?,
                Instr::Read { chan, dst } => match io.try_read(*chan) {
                    Some(v) => self.store(dst, v)?,
                    None => {
                        self.stats.steps -= 1;
                        *budget += 1;
                        return Ok(Status::Blocked);
                    }
                },
                Instr::Write { chan, value } => {
                    let v = match self.pending_write.take() {
                        Some(v) => v,
                        None => self.eval(value)?,
                    };
                    if !io.try_write(*chan, v) {
                        self.pending_write = Some(v);
                        self.stats.steps -= 1;
                        *budget += 1;
                        return Ok(Status::Blocked);
                    }
                }
            }
            self.pc += 1;
        }
        Ok(Status::Done)
    }
}

/// Deterministic values for every Global buffer `k` reads, keyed by formal
/// name. `weights` is He-distributed; other names take the role their
/// suffix implies (`bias`, `scale`, `shift`), anything else is an input.
pub fn synth_kernel_inputs(
    k: &KernelIR,
    bindings: &Bindings,
    seed: u64,
) -> Result<BTreeMap<String, Tensor>, IrError> {
    let env = k.resolve_env(bindings)?;
    let mut ins = BTreeMap::new();
    for b in k.global_buffers().filter(|b| b.access != Access::Write) {
        let shape = b.shape.iter().map(|d| d.resolve(&env)).collect::<Result<Vec<_>, _>>()?;
        let suffix = b.name.rsplit('_').next().unwrap_or(&b.name);
        let role = match suffix {
            "weights" => TensorRole::Weights { fan_in: shape[1..].iter().product::<usize>().max(1) },
            s => TensorRole::from_name(&format!("w:x:{s}"), &shape),
        };
        ins.insert(b.name.clone(), synth_tensor(seed, &b.name, &shape, role));
    }
    Ok(ins)
}

/// Executes `k` sequentially. `inputs` supplies Global buffers by formal
/// name; every written Global buffer is returned.
pub fn interpret_kernel(
    k: &KernelIR,
    bindings: &Bindings,
    inputs: &BTreeMap<String, Tensor>,
    opts: InterpOptions,
) -> Result<KernelOutput, IrError> {
    let prog = Program::compile(k, bindings, &BTreeMap::new(), opts.relaxed)?;
    let mut m = Machine::new(prog, opts.relaxed);
    for b in k.global_buffers() {
        match inputs.get(&b.name) {
            Some(t) => m.bind(&b.name, t)?,
            None if b.access == Access::Read => return Err(IrError::MissingTensor(b.name.clone())),
            None => {}
        }
    }
    let mut budget = opts.max_steps;
    if m.run(&mut NoChannels, &mut budget)? == Status::Blocked {
        return Err(IrError::DeadlockDetected { blocked: vec![k.id.clone()] });
    }
    let outputs = k
        .buffers
        .iter()
        .filter(|b| b.space == MemSpace::Global && b.access != Access::Read)
        .map(|b| (b.name.clone(), m.tensor(&b.name).expect("declared buffer")))
        .collect();
    Ok(KernelOutput { outputs, stats: m.stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loopir::lower_layer;
    use crate::netdef::{LayerOp, LayerSpec, Padding, Shape};

    fn run1(layer: LayerSpec, shape: Shape, tensors: &[(&str, Tensor)]) -> KernelOutput {
        let k = lower_layer(&layer, &[shape]).unwrap();
        let inputs = tensors.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        interpret_kernel(&k, &Bindings::new(), &inputs, InterpOptions::default()).unwrap()
    }

    #[test]
    fn hand_checked_convolution() {
        let layer = LayerSpec::new(
            "c",
            LayerOp::Conv2d { filters: 1, kh: 2, kw: 2, stride: 1, padding: Padding::Valid, bias: false },
            &["input"],
        );
        let input = Tensor::new(&[1, 3, 3], (1..=9).map(|v| v as f32).collect());
        let w = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let out = run1(layer, Shape::new(1, 3, 3), &[("input", input), ("weights", w)]);
        assert_eq!(out.outputs["output"].data, [6.0, 8.0, 12.0, 14.0]);
        assert_eq!(out.stats.macs, 16);
    }

    #[test]
    fn relu_values() {
        let out = run1(
            LayerSpec::new("r", LayerOp::Relu, &["input"]),
            Shape::new(1, 1, 3),
            &[("input", Tensor::new(&[1, 1, 3], vec![-1.0, 0.0, 2.5]))],
        );
        assert_eq!(out.outputs["output"].data, [0.0, 0.0, 2.5]);
        assert_eq!(out.stats.elem_ops, 3);
    }

    #[test]
    fn dense_matches_matrix_vector_product() {
        let layer = LayerSpec::new("d", LayerOp::Dense { units: 10, bias: true }, &["input"]);
        let x: Vec<f32> = (0..256).map(|i| ((i * 37 % 17) as f32 - 8.0) / 8.0).collect();
        let w: Vec<f32> = (0..2560).map(|i| ((i * 13 % 11) as f32 - 5.0) / 16.0).collect();
        let b: Vec<f32> = (0..10).map(|i| i as f32 / 10.0).collect();
        let out = run1(
            layer,
            Shape::new(256, 1, 1),
            &[
                ("input", Tensor::new(&[256, 1, 1], x.clone())),
                ("weights", Tensor::new(&[10, 256], w.clone())),
                ("bias", Tensor::new(&[10], b.clone())),
            ],
        );
        for o in 0..10 {
            let mut acc = b[o];
            for i in 0..256 {
                acc += x[i] * w[o * 256 + i];
            }
            assert_eq!(out.outputs["output"].data[o], acc);
        }
        assert_eq!(out.stats.macs, 2560);
    }

    #[test]
    fn unguarded_out_of_bounds_is_reported() {
        let mut k = lower_layer(&LayerSpec::new("r", LayerOp::Relu, &["input"]), &[Shape::new(1, 2, 2)])
            .unwrap();
        k.visit_stmts_mut(&mut |s| s.map_affine(&mut |e| e.clone() + 1));
        let inputs = BTreeMap::from([("input".to_string(), Tensor::zeros(&[1, 2, 2]))]);
        let err = interpret_kernel(&k, &Bindings::new(), &inputs, InterpOptions::default()).unwrap_err();
        assert!(matches!(err, IrError::OutOfBoundsIndex { .. }));
    }

    #[test]
    fn missing_input_and_unbound_symbol() {
        let k = lower_layer(&LayerSpec::new("r", LayerOp::Relu, &["input"]), &[Shape::new(1, 2, 2)])
            .unwrap();
        assert!(matches!(
            interpret_kernel(&k, &Bindings::new(), &BTreeMap::new(), InterpOptions::default()),
            Err(IrError::MissingTensor(_))
        ));
        let sym = crate::loopir::lower_layer_symbolic(
            &LayerSpec::new("r", LayerOp::Relu, &["input"]),
            &[Shape::new(1, 2, 2)],
        )
        .unwrap();
        assert!(matches!(
            interpret_kernel(&sym, &Bindings::new(), &BTreeMap::new(), InterpOptions::default()),
            Err(IrError::UnboundSym(_))
        ));
    }
}
