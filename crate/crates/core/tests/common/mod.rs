#![allow(dead_code)]

use std::collections::BTreeMap;

use cnnflow::loopir::{
    interpret_kernel, lower_layer, synth_kernel_inputs, Bindings, Dim, InterpOptions, KernelIR, MemSpace, Node, Tensor,
};
use cnnflow::netdef::{parse_network, LayerOp, LayerSpec, NetworkGraph, Padding, Shape};
use cnnflow::xform::{cache_writes, fuse_postop, parameterize_group, strip_mine, tile, unroll_full, XformError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OF_TOLERANCE: f32 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn opts(relaxed: bool) -> InterpOptions {
    InterpOptions { relaxed, ..InterpOptions::default() }
}

pub fn run(k: &KernelIR, bindings: &Bindings, seed: u64, relaxed: bool) -> Tensor {
    let ins = synth_kernel_inputs(k, bindings, seed).unwrap();
    interpret_kernel(k, bindings, &ins, opts(relaxed)).unwrap().outputs["output"].clone()
}

fn padding(r: &mut ChaCha8Rng) -> Padding {
    if r.gen_bool(0.5) {
        Padding::Same
    } else {
        Padding::Valid
    }
}

/// A small MAC or pooling layer with an input it accepts.
pub fn random_compute_layer(r: &mut ChaCha8Rng) -> (LayerSpec, Shape) {
    loop {
        let c = r.gen_range(1..=5);
        let h = r.gen_range(3..=7);
        let w = r.gen_range(3..=7);
        let k = *[1usize, 2, 3].choose(r).unwrap();
        let stride = r.gen_range(1..=2);
        let bias = r.gen_bool(0.5);
        let op = match r.gen_range(0..5) {
            0 => LayerOp::Conv2d { filters: r.gen_range(1..=4), kh: k, kw: k, stride, padding: padding(r), bias },
            1 => LayerOp::DepthwiseConv2d { kh: k, kw: k, stride, padding: padding(r), bias },
            2 => LayerOp::Dense { units: r.gen_range(1..=6), bias },
            3 => LayerOp::Maxpool { kh: k.max(2), kw: k.max(2), stride, padding: padding(r) },
            _ => LayerOp::Avgpool { kh: k, kw: k, stride, global: r.gen_bool(0.2) },
        };
        let shape = match op {
            LayerOp::Dense { .. } => Shape::new(c * h, 1, 1),
            _ => Shape::new(c, h, w),
        };
        let l = LayerSpec::new("l", op, &["input"]);
        if lower_layer(&l, &[shape]).is_ok() {
            return (l, shape);
        }
    }
}

fn random_post_op(r: &mut ChaCha8Rng) -> LayerOp {
    [LayerOp::Relu, LayerOp::Relu6, LayerOp::Batchnorm].choose(r).unwrap().clone()
}

/// A small layer of any kind with loops worth transforming.
pub fn random_kernel(r: &mut ChaCha8Rng) -> KernelIR {
    if r.gen_bool(0.25) {
        let s = Shape::new(r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(1..=5));
        let op = if r.gen_bool(0.25) { LayerOp::Add } else { random_post_op(r) };
        let inputs: &[&str] = if op == LayerOp::Add { &["a", "b"] } else { &["a"] };
        let l = LayerSpec::new("e", op, inputs);
        return lower_layer(&l, &vec![s; inputs.len()]).unwrap();
    }
    let (l, s) = random_compute_layer(r);
    lower_layer(&l, &[s]).unwrap()
}

/// Constant-extent loops not yet unrolled.
pub fn const_loops(k: &KernelIR) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    k.visit_loops(&mut |l, _| {
        if let (Dim::Const(e), false) = (&l.extent, l.unroll_full) {
            out.push((l.var.clone(), *e));
        }
    });
    out
}

pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

/// Loop chains enclosing some statement, outermost first.
pub fn chains(k: &KernelIR) -> Vec<Vec<(String, usize)>> {
    let mut out: Vec<Vec<(String, usize)>> = Vec::new();
    k.visit_stmts(&mut |_, loops| {
        let c: Vec<(String, usize)> = loops
            .iter()
            .filter(|l| !l.unroll_full)
            .filter_map(|l| l.extent.as_const().map(|e| (l.var.clone(), e)))
            .collect();
        if !out.contains(&c) {
            out.push(c);
        }
    });
    out
}

pub const TRANSFORMS: [&str; 6] = ["unroll", "strip_mine", "tile", "fuse", "cache_writes", "parameterize"];

/// What a transformed kernel is compared against.
pub enum Reference {
    Kernel(KernelIR, Bindings),
    /// Producer, then the unfused post kernel on its output.
    Chain(KernelIR, KernelIR),
}

pub struct Run {
    pub reference: Reference,
    pub kernel: KernelIR,
    pub bindings: Bindings,
}

pub struct Case {
    pub name: String,
    pub runs: Vec<Run>,
}

impl Case {
    fn single(name: String, before: KernelIR, after: KernelIR) -> Case {
        Case {
            name,
            runs: vec![Run { reference: Reference::Kernel(before, Bindings::new()), kernel: after, bindings: Bindings::new() }],
        }
    }
}

/// Strict-order reference output, fed the same tensors the candidate sees.
pub fn reference_output(run: &Run, seed: u64) -> Tensor {
    match &run.reference {
        Reference::Kernel(k, b) => self::run(k, b, seed, false),
        Reference::Chain(p, q) => {
            let fused_in = synth_kernel_inputs(&run.kernel, &run.bindings, seed).unwrap();
            let pin: BTreeMap<String, Tensor> =
                fused_in.iter().filter(|(n, _)| !n.starts_with("post")).map(|(n, t)| (n.clone(), t.clone())).collect();
            let mid = interpret_kernel(p, &Bindings::new(), &pin, opts(false)).unwrap().outputs["output"].clone();
            let mut qin: BTreeMap<String, Tensor> = fused_in
                .iter()
                .filter_map(|(n, t)| n.strip_prefix("post0_").map(|s| (s.to_string(), t.clone())))
                .collect();
            let want: Vec<usize> = q.buffer("input").unwrap().shape.iter().map(|d| d.as_const().unwrap()).collect();
            qin.insert("input".into(), Tensor::new(&want, mid.data));
            interpret_kernel(q, &Bindings::new(), &qin, opts(false)).unwrap().outputs["output"].clone()
        }
    }
}

pub fn candidate_output(run: &Run, seed: u64, relaxed: bool) -> Tensor {
    self::run(&run.kernel, &run.bindings, seed, relaxed)
}

/// A random applicable instance of `transform`.
pub fn random_case(transform: &str, r: &mut ChaCha8Rng) -> Case {
    match transform {
        "unroll" => loop {
            let k = random_kernel(r);
            let loops: Vec<_> = const_loops(&k).into_iter().filter(|(_, e)| *e <= 8).collect();
            if let Some((v, _)) = loops.choose(r) {
                let t = unroll_full(&k, v).unwrap();
                return Case::single(format!("{} unroll {v}", k.id), k, t);
            }
        },
        "strip_mine" => loop {
            let k = random_kernel(r);
            if let Some((v, e)) = const_loops(&k).choose(r) {
                let f = *divisors(*e).choose(r).unwrap();
                let t = strip_mine(&k, v, f).unwrap();
                return Case::single(format!("{} strip_mine {v} {f}", k.id), k, t);
            }
        },
        "tile" => loop {
            let k = random_kernel(r);
            let cs: Vec<_> = chains(&k).into_iter().filter(|c| c.len() >= 2).collect();
            let Some(c) = cs.choose(r) else { continue };
            let n = r.gen_range(2..=c.len().min(3));
            let picked: Vec<_> = c.choose_multiple(r, n).cloned().collect();
            let vars: Vec<String> = picked.iter().map(|(v, _)| v.clone()).collect();
            let fs: Vec<usize> = picked.iter().map(|(_, e)| *divisors(*e).choose(r).unwrap()).collect();
            let t = tile(&k, &vars, &fs).unwrap();
            return Case::single(format!("{} tile {vars:?} {fs:?}", k.id), k, t);
        },
        "fuse" => loop {
            let (l, s) = random_compute_layer(r);
            let p = lower_layer(&l, &[s]).unwrap();
            let out: Vec<usize> = p.buffer("output").unwrap().shape.iter().map(|d| d.as_const().unwrap()).collect();
            let [c, h, w] = match out[..] {
                [c, h, w] => [c, h, w],
                [c] => [c, 1, 1],
                _ => continue,
            };
            let post = LayerSpec::new("post", random_post_op(r), &["l"]);
            let q = lower_layer(&post, &[Shape::new(c, h, w)]).unwrap();
            match fuse_postop(&p, &q) {
                Ok(f) => {
                    let name = format!("{} fuse {}", p.id, post.kind());
                    return Case {
                        name,
                        runs: vec![Run { reference: Reference::Chain(p, q), kernel: f, bindings: Bindings::new() }],
                    };
                }
                Err(XformError::FusionMismatch(_)) => continue,
                Err(e) => panic!("{e}"),
            }
        },
        "cache_writes" => loop {
            let (l, s) = random_compute_layer(r);
            let mut k = lower_layer(&l, &[s]).unwrap();
            if r.gen_bool(0.3) {
                let (v, e) = const_loops(&k).choose(r).unwrap().clone();
                k = strip_mine(&k, &v, *divisors(e).choose(r).unwrap()).unwrap();
            }
            if let Ok(t) = cache_writes(&k, "output") {
                return Case::single(format!("{} cache_writes", k.id), k, t);
            }
        },
        "parameterize" => loop {
            let kh = *[1usize, 3].choose(r).unwrap();
            let stride = r.gen_range(1..=2);
            let pad = padding(r);
            let depthwise = r.gen_bool(0.3);
            let bias = r.gen_bool(0.5);
            let n = r.gen_range(2..=3);
            let members: Vec<(LayerSpec, Shape)> = (0..n)
                .map(|i| {
                    let op = if depthwise {
                        LayerOp::DepthwiseConv2d { kh, kw: kh, stride, padding: pad, bias }
                    } else {
                        LayerOp::Conv2d { filters: r.gen_range(1..=4), kh, kw: kh, stride, padding: pad, bias }
                    };
                    let hw = r.gen_range(kh.max(2)..=6);
                    (LayerSpec::new(format!("m{i}"), op, &["input"]), Shape::new(r.gen_range(1..=4), hw, hw))
                })
                .collect();
            let kernels: Vec<KernelIR> = members.iter().map(|(l, s)| lower_layer(l, &[*s]).unwrap()).collect();
            let key = members[0].0.group_key();
            let g = match parameterize_group(&kernels, &key) {
                Ok(g) => g,
                Err(XformError::StructuralDivergence { .. }) => continue,
                Err(e) => panic!("{e}"),
            };
            let runs = kernels
                .into_iter()
                .zip(&g.invocations)
                .map(|(k, inv)| Run {
                    reference: Reference::Kernel(k, Bindings::new()),
                    kernel: g.kernel.clone(),
                    bindings: inv.bindings.clone(),
                })
                .collect();
            return Case { name: format!("parameterize {key} x{n}"), runs };
        },
        other => panic!("unknown transform {other}"),
    }
}

/// Reconvergent fixture: `p` forks to a 3x3 maxpool `a`, which must see
/// a full window of `p` before emitting, and to `c = a + p`.
pub fn reconvergent_graph() -> NetworkGraph {
    parse_network(
        r#"{
          "format_version": 1,
          "name": "fork",
          "input_shape": [2, 4, 4],
          "layers": [
            {"id": "p", "kind": "relu", "inputs": ["input"]},
            {"id": "a", "kind": "maxpool", "attrs": {"kernel_h": 3, "kernel_w": 3, "stride": 1, "padding": "same"}, "inputs": ["p"]},
            {"id": "c", "kind": "add", "inputs": ["a", "p"]}
          ]
        }"#,
    )
    .unwrap()
}

/// A small random chain ending in flatten and dense.
pub fn random_network(r: &mut ChaCha8Rng) -> NetworkGraph {
    let c = r.gen_range(1..=4);
    let hw = r.gen_range(6..=12);
    let mut layers = Vec::new();
    let mut prev = "input".to_string();
    for i in 0..r.gen_range(1..=4) {
        let id = format!("l{i}");
        let k = *[1usize, 3].choose(r).unwrap();
        layers.push(match r.gen_range(0..4) {
            0 => format!(
                r#"{{"id": "{id}", "kind": "conv2d", "attrs": {{"filters": {}, "kernel_h": {k}, "kernel_w": {k}, "stride": 1, "padding": "same"}}, "inputs": ["{prev}"]}}"#,
                r.gen_range(1..=6)
            ),
            1 => format!(
                r#"{{"id": "{id}", "kind": "depthwise_conv2d", "attrs": {{"kernel_h": {k}, "kernel_w": {k}, "stride": 1, "padding": "same"}}, "inputs": ["{prev}"]}}"#
            ),
            2 => format!(r#"{{"id": "{id}", "kind": "relu", "inputs": ["{prev}"]}}"#),
            _ => format!(
                r#"{{"id": "{id}", "kind": "maxpool", "attrs": {{"kernel_h": 2, "kernel_w": 2, "stride": 1, "padding": "same"}}, "inputs": ["{prev}"]}}"#
            ),
        });
        prev = id;
    }
    layers.push(format!(r#"{{"id": "flat", "kind": "flatten", "inputs": ["{prev}"]}}"#));
    layers.push(format!(
        r#"{{"id": "fc", "kind": "dense", "attrs": {{"units": {}}}, "inputs": ["flat"]}}"#,
        r.gen_range(2..=8)
    ));
    let doc = format!(
        r#"{{"format_version": 1, "name": "rand", "input_shape": [{c}, {hw}, {hw}], "layers": [{}]}}"#,
        layers.join(",\n")
    );
    parse_network(&doc).unwrap()
}

/// Widest set of simultaneous elements any Global access touches.
pub fn max_global_span(k: &KernelIR) -> usize {
    let mut best = 1;
    k.visit_stmts(&mut |s, loops| {
        let mut sites = s.reads();
        sites.extend(s.writes());
        for a in sites {
            if k.buffer(&a.buffer).map(|b| b.space) != Some(MemSpace::Global) {
                continue;
            }
            let n: usize = loops
                .iter()
                .filter(|l| l.unroll_full && a.uses_var(&l.var))
                .map(|l| l.extent.as_const().unwrap())
                .product();
            best = best.max(n);
        }
    });
    best
}

/// Independent DSP oracle: walks the IR, literally iterating every
/// unrolled loop, and counts MAC statement instances.
pub fn brute_force_mac_lanes(k: &KernelIR) -> u64 {
    fn walk(nodes: &[Node]) -> u64 {
        let mut n = 0;
        for node in nodes {
            match node {
                Node::Stmt(s) => n += s.is_mac() as u64,
                Node::Loop(l) if l.unroll_full => {
                    for _ in 0..l.extent.as_const().expect("unrolled loops are constant") {
                        n += walk(&l.body);
                    }
                }
                Node::Loop(l) => n += walk(&l.body),
            }
        }
        n
    }
    walk(&k.body)
}
