use std::collections::BTreeMap;

use super::{
    Access, AffineExpr, BinOp, BufAccess, BufferDecl, Bindings, DerivedSym, Dim, Expr, IrError,
    KernelIR, KernelOrigin, MemSpace, Node, Stmt, SymExpr, UnOp,
};
use crate::netdef::{conv_out_dim, same_pad_before, LayerOp, LayerSpec, Padding, Shape, INPUT_ID};

/// Builds dimensions either as constants or as kernel parameters.
struct Ctx {
    symbolic: bool,
    params: Vec<String>,
    derived: Vec<DerivedSym>,
}

impl Ctx {
    fn param(&mut self, name: &str, value: usize) -> Dim {
        if self.symbolic {
            self.params.push(name.to_string());
            Dim::sym(name)
        } else {
            Dim::Const(value)
        }
    }

    fn derived(&mut self, name: &str, expr: SymExpr, value: usize) -> Dim {
        if self.symbolic {
            self.derived.push(DerivedSym { name: name.to_string(), expr });
            Dim::sym(name)
        } else {
            Dim::Const(value)
        }
    }
}

fn c(n: i64) -> SymExpr {
    SymExpr::Const(n)
}

fn p(n: &str) -> SymExpr {
    SymExpr::param(n)
}

fn v(n: &str) -> AffineExpr {
    AffineExpr::var(n)
}

fn load(buf: &str, idx: Vec<AffineExpr>) -> Expr {
    Expr::Load(BufAccess::new(buf, idx))
}

fn stmt(s: Stmt) -> Node {
    Node::Stmt(s)
}

fn lp(var: &str, extent: &Dim, body: Vec<Node>) -> Node {
    Node::for_loop(var, extent.clone(), body)
}

/// Output extent and leading pad along one spatial axis.
struct Axis {
    out: Dim,
    pad: AffineExpr,
}

#[allow(clippy::too_many_arguments)]
fn window_axis(
    cx: &mut Ctx,
    out_name: &str,
    pad_name: &str,
    in_name: &str,
    in_value: usize,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Axis {
    let (k_i, s_i) = (k as i64, stride as i64);
    let out_value = conv_out_dim(in_value, k, stride, padding).expect("validated shape");
    match padding {
        Padding::Valid => {
            let expr = SymExpr::add(
                SymExpr::floor_div(SymExpr::sub(p(in_name), c(k_i)), c(s_i)),
                c(1),
            );
            Axis { out: cx.derived(out_name, expr, out_value), pad: AffineExpr::constant(0) }
        }
        Padding::Same => {
            let expr = SymExpr::floor_div(SymExpr::add(p(in_name), c(s_i - 1)), c(s_i));
            let out = cx.derived(out_name, expr, out_value);
            let pad_expr = SymExpr::floor_div(
                SymExpr::max(
                    SymExpr::sub(
                        SymExpr::add(SymExpr::mul(SymExpr::sub(p(out_name), c(1)), c(s_i)), c(k_i)),
                        p(in_name),
                    ),
                    c(0),
                ),
                c(2),
            );
            let pad = if cx.symbolic {
                cx.derived.push(DerivedSym { name: pad_name.to_string(), expr: pad_expr });
                v(pad_name)
            } else {
                AffineExpr::constant(same_pad_before(in_value, k, stride) as i64)
            };
            Axis { out, pad }
        }
    }
}

fn chw(cx: &mut Ctx, s: Shape) -> (Dim, Dim, Dim) {
    (cx.param("C", s.c), cx.param("H", s.h), cx.param("W", s.w))
}

fn buf(name: &str, space: MemSpace, shape: &[&Dim], access: Access) -> BufferDecl {
    BufferDecl::new(name, space, shape.iter().map(|d| (*d).clone()).collect(), access)
}

fn global_in(name: &str, shape: &[&Dim]) -> BufferDecl {
    buf(name, MemSpace::Global, shape, Access::Read)
}

fn lower_impl(layer: &LayerSpec, ins: &[Shape], symbolic: bool) -> Result<KernelIR, IrError> {
    let mut cx = Ctx { symbolic, params: Vec::new(), derived: Vec::new() };
    let one = Dim::Const(1);
    let zero = AffineExpr::constant(0);
    let s = ins[0];
    let mut buffers = Vec::new();
    let body: Vec<Node>;
    match layer.op {
        LayerOp::Conv2d { .. } | LayerOp::DepthwiseConv2d { .. } => {
            let (filters, kh, kw, stride, padding, bias, depthwise) = match layer.op {
                LayerOp::Conv2d { filters, kh, kw, stride, padding, bias } => {
                    (filters, kh, kw, stride, padding, bias, false)
                }
                LayerOp::DepthwiseConv2d { kh, kw, stride, padding, bias } => {
                    (0, kh, kw, stride, padding, bias, true)
                }
                _ => unreachable!(),
            };
            let f = if depthwise { None } else { Some(cx.param("F", filters)) };
            let (cd, hd, wd) = chw(&mut cx, s);
            let ya = window_axis(&mut cx, "OH", "PT", "H", s.h, kh, stride, padding);
            let xa = window_axis(&mut cx, "OW", "PL", "W", s.w, kw, stride, padding);
            let (khd, kwd) = (Dim::Const(kh), Dim::Const(kw));
            let st = stride as i64;
            let guard = padding == Padding::Same && (kh > 1 || kw > 1);
            // Output channel loop var: f for conv, c for depthwise.
            let (ov, od) = match &f {
                Some(fd) => ("f", fd.clone()),
                None => ("c", cd.clone()),
            };
            let in_c = if depthwise { v("c") } else { v("ic") };
            let mut input = BufAccess::new(
                "input",
                vec![
                    in_c,
                    v("oy") * st + v("ky") - ya.pad.clone(),
                    v("ox") * st + v("kx") - xa.pad.clone(),
                ],
            );
            if guard {
                input = input.guarded(0.0);
            }
            let w_idx = if depthwise {
                vec![v("c"), v("ky"), v("kx")]
            } else {
                vec![v("f"), v("ic"), v("ky"), v("kx")]
            };
            let out = BufAccess::new("output", vec![v(ov), v("oy"), v("ox")]);
            let mac = stmt(Stmt::Mac {
                acc: out.clone(),
                a: Expr::Load(input),
                b: load("weights", w_idx),
            });
            let taps = lp("ky", &khd, vec![lp("kx", &kwd, vec![mac])]);
            let reduction = if depthwise { taps } else { lp("ic", &cd, vec![taps]) };
            let init = if bias { load("bias", vec![v(ov)]) } else { Expr::Const(0.0) };
            body = vec![lp(
                ov,
                &od,
                vec![lp(
                    "oy",
                    &ya.out,
                    vec![lp(
                        "ox",
                        &xa.out,
                        vec![stmt(Stmt::Store { dst: out, value: init }), reduction],
                    )],
                )],
            )];
            buffers.push(global_in("input", &[&cd, &hd, &wd]));
            if depthwise {
                buffers.push(global_in("weights", &[&cd, &khd, &kwd]));
            } else {
                buffers.push(global_in("weights", &[&od, &cd, &khd, &kwd]));
            }
            if bias {
                buffers.push(global_in("bias", &[&od]));
            }
            buffers.push(buf("output", MemSpace::Global, &[&od, &ya.out, &xa.out], Access::ReadWrite));
        }
        LayerOp::Dense { units, bias } => {
            let fd = cx.param("F", units);
            let cd = cx.param("C", s.c);
            let out = BufAccess::new("output", vec![v("o"), zero.clone(), zero.clone()]);
            let mac = stmt(Stmt::Mac {
                acc: out.clone(),
                a: load("input", vec![v("i"), zero.clone(), zero.clone()]),
                b: load("weights", vec![v("o"), v("i")]),
            });
            let init = if bias { load("bias", vec![v("o")]) } else { Expr::Const(0.0) };
            body = vec![lp(
                "o",
                &fd,
                vec![stmt(Stmt::Store { dst: out, value: init }), lp("i", &cd, vec![mac])],
            )];
            buffers.push(global_in("input", &[&cd, &one, &one]));
            buffers.push(global_in("weights", &[&fd, &cd]));
            if bias {
                buffers.push(global_in("bias", &[&fd]));
            }
            buffers.push(buf("output", MemSpace::Global, &[&fd, &one, &one], Access::ReadWrite));
        }
        LayerOp::Maxpool { kh, kw, stride, padding } => {
            let (cd, hd, wd) = chw(&mut cx, s);
            let ya = window_axis(&mut cx, "OH", "PT", "H", s.h, kh, stride, padding);
            let xa = window_axis(&mut cx, "OW", "PL", "W", s.w, kw, stride, padding);
            let st = stride as i64;
            let mut input = BufAccess::new(
                "input",
                vec![
                    v("c"),
                    v("oy") * st + v("ky") - ya.pad.clone(),
                    v("ox") * st + v("kx") - xa.pad.clone(),
                ],
            );
            if padding == Padding::Same && (kh > 1 || kw > 1) {
                input = input.guarded(f32::NEG_INFINITY);
            }
            let out = BufAccess::new("output", vec![v("c"), v("oy"), v("ox")]);
            let upd = stmt(Stmt::Store {
                dst: out.clone(),
                value: Expr::binary(BinOp::Max, Expr::Load(out.clone()), Expr::Load(input)),
            });
            body = vec![lp(
                "c",
                &cd,
                vec![lp(
                    "oy",
                    &ya.out,
                    vec![lp(
                        "ox",
                        &xa.out,
                        vec![
                            stmt(Stmt::Store { dst: out, value: Expr::Const(f32::NEG_INFINITY) }),
                            lp("ky", &Dim::Const(kh), vec![lp("kx", &Dim::Const(kw), vec![upd])]),
                        ],
                    )],
                )],
            )];
            buffers.push(global_in("input", &[&cd, &hd, &wd]));
            buffers.push(buf("output", MemSpace::Global, &[&cd, &ya.out, &xa.out], Access::ReadWrite));
        }
        LayerOp::Avgpool { kh, kw, stride, global } => {
            let (cd, hd, wd) = chw(&mut cx, s);
            let (oh, ow, khd, kwd, divisor, in_idx) = if global {
                let n = (s.h * s.w) as f32;
                let div = if symbolic {
                    cx.derived.push(DerivedSym {
                        name: "HW".into(),
                        expr: SymExpr::mul(p("H"), p("W")),
                    });
                    Expr::Index(v("HW"))
                } else {
                    Expr::Const(n)
                };
                (one.clone(), one.clone(), hd.clone(), wd.clone(), div, vec![v("c"), v("ky"), v("kx")])
            } else {
                let ya = window_axis(&mut cx, "OH", "PT", "H", s.h, kh, stride, Padding::Valid);
                let xa = window_axis(&mut cx, "OW", "PL", "W", s.w, kw, stride, Padding::Valid);
                let st = stride as i64;
                (
                    ya.out,
                    xa.out,
                    Dim::Const(kh),
                    Dim::Const(kw),
                    Expr::Const((kh * kw) as f32),
                    vec![v("c"), v("oy") * st + v("ky"), v("ox") * st + v("kx")],
                )
            };
            let out_idx = if global {
                vec![v("c"), zero.clone(), zero.clone()]
            } else {
                vec![v("c"), v("oy"), v("ox")]
            };
            let out = BufAccess::new("output", out_idx);
            let upd = stmt(Stmt::Store {
                dst: out.clone(),
                value: Expr::binary(BinOp::Add, Expr::Load(out.clone()), load("input", in_idx)),
            });
            let band = vec![
                stmt(Stmt::Store { dst: out.clone(), value: Expr::Const(0.0) }),
                lp("ky", &khd, vec![lp("kx", &kwd, vec![upd])]),
                stmt(Stmt::Store {
                    dst: out.clone(),
                    value: Expr::binary(BinOp::Div, Expr::Load(out), divisor),
                }),
            ];
            body = if global {
                vec![lp("c", &cd, band)]
            } else {
                vec![lp("c", &cd, vec![lp("oy", &oh, vec![lp("ox", &ow, band)])])]
            };
            buffers.push(global_in("input", &[&cd, &hd, &wd]));
            buffers.push(buf("output", MemSpace::Global, &[&cd, &oh, &ow], Access::ReadWrite));
        }
        LayerOp::Relu | LayerOp::Relu6 | LayerOp::Batchnorm | LayerOp::Add => {
            let (cd, hd, wd) = chw(&mut cx, s);
            let idx = vec![v("c"), v("y"), v("x")];
            let value = match layer.op {
                LayerOp::Relu => Expr::unary(UnOp::Relu, load("input", idx.clone())),
                LayerOp::Relu6 => Expr::unary(UnOp::Relu6, load("input", idx.clone())),
                LayerOp::Batchnorm => Expr::scale_shift(
                    load("input", idx.clone()),
                    load("scale", vec![v("c")]),
                    load("shift", vec![v("c")]),
                ),
                _ => Expr::binary(
                    BinOp::Add,
                    load("input0", idx.clone()),
                    load("input1", idx.clone()),
                ),
            };
            body = vec![elementwise_nest(&cd, &hd, &wd, BufAccess::new("output", idx), value)];
            if matches!(layer.op, LayerOp::Add) {
                buffers.push(global_in("input0", &[&cd, &hd, &wd]));
                buffers.push(global_in("input1", &[&cd, &hd, &wd]));
            } else {
                buffers.push(global_in("input", &[&cd, &hd, &wd]));
            }
            if matches!(layer.op, LayerOp::Batchnorm) {
                buffers.push(global_in("scale", &[&cd]));
                buffers.push(global_in("shift", &[&cd]));
            }
            buffers.push(buf("output", MemSpace::Global, &[&cd, &hd, &wd], Access::Write));
        }
        LayerOp::Pad { .. } | LayerOp::Flatten | LayerOp::Transpose { .. } if symbolic => {
            return Err(IrError::UnsupportedKind(format!("{} (parameterized)", layer.kind())));
        }
        LayerOp::Pad { top, bottom, left, right } => {
            let (cd, hd, wd) = (Dim::Const(s.c), Dim::Const(s.h), Dim::Const(s.w));
            let (oh, ow) = (Dim::Const(s.h + top + bottom), Dim::Const(s.w + left + right));
            let mut input = BufAccess::new(
                "input",
                vec![v("c"), v("y") + -(top as i64), v("x") + -(left as i64)],
            );
            if top + bottom + left + right > 0 {
                input = input.guarded(0.0);
            }
            let out = BufAccess::new("output", vec![v("c"), v("y"), v("x")]);
            body = vec![elementwise_nest(&cd, &oh, &ow, out, Expr::Load(input))];
            buffers.push(global_in("input", &[&cd, &hd, &wd]));
            buffers.push(buf("output", MemSpace::Global, &[&cd, &oh, &ow], Access::Write));
        }
        LayerOp::Flatten => {
            let (cd, hd, wd) = (Dim::Const(s.c), Dim::Const(s.h), Dim::Const(s.w));
            let n = Dim::Const(s.elems());
            let flat = v("c") * (s.h * s.w) as i64 + v("y") * s.w as i64 + v("x");
            let out = BufAccess::new("output", vec![flat, zero.clone(), zero.clone()]);
            let value = load("input", vec![v("c"), v("y"), v("x")]);
            body = vec![elementwise_nest(&cd, &hd, &wd, out, value)];
            buffers.push(global_in("input", &[&cd, &hd, &wd]));
            buffers.push(buf("output", MemSpace::Global, &[&n, &one, &one], Access::Write));
        }
        LayerOp::Transpose { perm } => {
            let d = s.dims();
            let od: Vec<Dim> = perm.iter().map(|&a| Dim::Const(d[a])).collect();
            let vars = ["c", "y", "x"];
            let mut in_idx = vec![zero.clone(); 3];
            for (i, &a) in perm.iter().enumerate() {
                in_idx[a] = v(vars[i]);
            }
            let out = BufAccess::new("output", vars.iter().map(|n| v(n)).collect());
            body = vec![elementwise_nest(&od[0], &od[1], &od[2], out, load("input", in_idx))];
            let ind: Vec<Dim> = d.iter().map(|&x| Dim::Const(x)).collect();
            buffers.push(global_in("input", &[&ind[0], &ind[1], &ind[2]]));
            buffers.push(buf("output", MemSpace::Global, &[&od[0], &od[1], &od[2]], Access::Write));
        }
    }
    let mut k = KernelIR::new(&layer.id);
    k.params = cx.params;
    k.derived = cx.derived;
    k.buffers = buffers;
    k.body = body;
    k.origin = Some(KernelOrigin {
        layer: layer.clone(),
        input_shapes: ins.to_vec(),
        posts: Vec::new(),
        buffer_map: layer_buffer_map(layer),
    });
    k.prune_buffers();
    k.refresh_access();
    Ok(k)
}

fn elementwise_nest(cd: &Dim, hd: &Dim, wd: &Dim, dst: BufAccess, value: Expr) -> Node {
    lp("c", cd, vec![lp("y", hd, vec![lp("x", wd, vec![stmt(Stmt::Store { dst, value })])])])
}

/// Canonical naive loop nest for one layer, all extents constant.
pub fn lower_layer(layer: &LayerSpec, input_shapes: &[Shape]) -> Result<KernelIR, IrError> {
    lower_impl(layer, input_shapes, false)
}

/// The same loop nest with `F`/`C`/`H`/`W` (as applicable) left symbolic.
/// `input_shapes` only decides structure, never extents.
pub fn lower_layer_symbolic(layer: &LayerSpec, input_shapes: &[Shape]) -> Result<KernelIR, IrError> {
    lower_impl(layer, input_shapes, true)
}

/// Scalar parameter values a layer binds in its symbolic kernel.
pub fn layer_params(layer: &LayerSpec, input_shapes: &[Shape]) -> Bindings {
    let s = input_shapes[0];
    let mut b = Bindings::new();
    match layer.op {
        LayerOp::Conv2d { filters, .. } => {
            b.insert("F".into(), filters as i64);
        }
        LayerOp::Dense { units, .. } => {
            b.insert("F".into(), units as i64);
            b.insert("C".into(), s.c as i64);
            return b;
        }
        _ => {}
    }
    b.insert("C".into(), s.c as i64);
    b.insert("H".into(), s.h as i64);
    b.insert("W".into(), s.w as i64);
    b
}

/// Formal buffer → global tensor names for a freshly lowered layer.
pub fn layer_buffer_map(layer: &LayerSpec) -> BTreeMap<String, String> {
    let act = |id: &str| format!("act:{}", if id == INPUT_ID { INPUT_ID } else { id });
    let mut m = BTreeMap::new();
    if layer.inputs.len() == 2 {
        m.insert("input0".to_string(), act(&layer.inputs[0]));
        m.insert("input1".to_string(), act(&layer.inputs[1]));
    } else {
        m.insert("input".to_string(), act(&layer.inputs[0]));
    }
    m.insert("output".to_string(), act(&layer.id));
    for role in ["weights", "bias", "scale", "shift"] {
        m.insert(role.to_string(), format!("w:{}:{role}", layer.id));
    }
    m
}

/// Binds every parameter, leaving a constant-extent kernel.
pub fn specialize(k: &KernelIR, bindings: &Bindings) -> Result<KernelIR, IrError> {
    let env = k.resolve_env(bindings)?;
    let mut out = k.clone();
    out.params.clear();
    out.derived.clear();
    out.requires.clear();
    for b in &mut out.buffers {
        for d in &mut b.shape {
            *d = d.bind(&env);
        }
    }
    out.visit_loops_mut(&mut |l| l.extent = l.extent.bind(&env));
    out.visit_stmts_mut(&mut |s| {
        s.map_affine(&mut |e| e.bind(&env));
        fold_index_consts(s);
    });
    Ok(out)
}

fn fold_index_consts(s: &mut Stmt) {
    fn go(e: &mut Expr) {
        match e {
            Expr::Index(a) if a.is_constant() => *e = Expr::Const(a.constant as f32),
            Expr::Unary(_, x) => go(x),
            Expr::Binary(_, a, b) => {
                go(a);
                go(b);
            }
            Expr::ScaleShift(x, s, t) => {
                go(x);
                go(s);
                go(t);
            }
            _ => {}
        }
    }
    match s {
        Stmt::Store { value, .. } | Stmt::ChannelWrite { value, .. } => go(value),
        Stmt::Mac { a, b, .. } => {
            go(a);
            go(b);
        }
        Stmt::ChannelRead { .. } => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::LayerKind;

    fn depth(k: &KernelIR) -> usize {
        let mut d = 0;
        k.visit_loops(&mut |_, x| d = d.max(x + 1));
        d
    }

    #[test]
    fn conv_is_six_deep_with_one_global_mac() {
        let l = LayerSpec::new(
            "conv1",
            LayerOp::Conv2d { filters: 8, kh: 5, kw: 5, stride: 1, padding: Padding::Valid, bias: true },
            &["input"],
        );
        let k = lower_layer(&l, &[Shape::new(1, 28, 28)]).unwrap();
        assert_eq!(depth(&k), 6);
        assert_eq!(k.mac_statements(), 1);
        assert_eq!(k.buffer("output").unwrap().space, MemSpace::Global);
        assert_eq!(k.buffer("output").unwrap().access, Access::ReadWrite);
        assert_eq!(k.loop_vars(), ["f", "oy", "ox", "ic", "ky", "kx"]);
    }

    #[test]
    fn relu_is_a_single_three_deep_nest() {
        let l = LayerSpec::new("r", LayerOp::Relu, &["input"]);
        let k = lower_layer(&l, &[Shape::new(8, 14, 14)]).unwrap();
        assert_eq!(depth(&k), 3);
        assert_eq!(k.body.len(), 1);
        assert_eq!(k.mac_statements(), 0);
    }

    #[test]
    fn symbolic_conv_specializes_to_const_lowering() {
        for padding in [Padding::Same, Padding::Valid] {
            let l = LayerSpec::new(
                "c",
                LayerOp::Conv2d { filters: 6, kh: 3, kw: 3, stride: 2, padding, bias: false },
                &["input"],
            );
            let s = [Shape::new(4, 9, 7)];
            let sym = lower_layer_symbolic(&l, &s).unwrap();
            assert_eq!(sym.params, ["F", "C", "H", "W"]);
            let spec = specialize(&sym, &layer_params(&l, &s)).unwrap();
            let direct = lower_layer(&l, &s).unwrap();
            assert_eq!(spec.body, direct.body);
            assert_eq!(spec.buffers, direct.buffers);
        }
    }

    #[test]
    fn global_avgpool_specializes() {
        let l = LayerSpec::new("g", LayerOp::Avgpool { kh: 0, kw: 0, stride: 1, global: true }, &["input"]);
        let s = [Shape::new(3, 5, 5)];
        let sym = lower_layer_symbolic(&l, &s).unwrap();
        let spec = specialize(&sym, &layer_params(&l, &s)).unwrap();
        assert_eq!(spec.body, lower_layer(&l, &s).unwrap().body);
        assert_eq!(l.kind(), LayerKind::Avgpool);
    }

    #[test]
    fn data_movement_is_not_parameterizable() {
        let l = LayerSpec::new("f", LayerOp::Flatten, &["input"]);
        assert!(matches!(
            lower_layer_symbolic(&l, &[Shape::new(2, 2, 2)]),
            Err(IrError::UnsupportedKind(_))
        ));
    }
}
