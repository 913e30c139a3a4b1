//! Apply loop transformations and check each against the untransformed
//! kernel with the interpreter.

use cnnflow::loopir::{
    compare_tensors, interpret_kernel, lower_layer, print_kernel, synth_kernel_inputs, Bindings, InterpOptions,
    KernelIR, Tensor,
};
use cnnflow::netdef::{LayerOp, LayerSpec, Padding, Shape};
use cnnflow::xform::{cache_writes, fuse_postop, strip_mine, tile, unroll_full};

fn run(k: &KernelIR, relaxed: bool) -> anyhow::Result<Tensor> {
    let b = Bindings::new();
    let ins = synth_kernel_inputs(k, &b, 1)?;
    Ok(interpret_kernel(k, &b, &ins, InterpOptions { relaxed, ..Default::default() })?.outputs["output"].clone())
}

fn main() -> anyhow::Result<()> {
    let conv = LayerSpec::new(
        "conv",
        LayerOp::Conv2d { filters: 4, kh: 3, kw: 3, stride: 1, padding: Padding::Same, bias: true },
        &["input"],
    );
    let relu = LayerSpec::new("relu", LayerOp::Relu, &["conv"]);
    let k = lower_layer(&conv, &[Shape::new(4, 8, 8)])?;
    let r = lower_layer(&relu, &[Shape::new(4, 8, 8)])?;
    let base = run(&k, false)?;

    let steps: Vec<(&str, KernelIR)> = vec![
        ("unroll kx", unroll_full(&k, "kx")?),
        ("strip_mine ic by 2", strip_mine(&k, "ic", 2)?),
        ("tile oy,ic by 4,2", tile(&k, &["oy".into(), "ic".into()], &[4, 2])?),
        ("cache_writes output", cache_writes(&k, "output")?),
    ];
    for (name, t) in &steps {
        let strict = run(t, false)?;
        let relaxed = compare_tensors(&run(t, true)?, &base).map_err(anyhow::Error::msg)?;
        println!("{name:<22} bitwise {}  relaxed err {relaxed:.1e}", strict.data == base.data);
    }

    let fused = fuse_postop(&k, &r)?;
    let expect: Vec<f32> = base.data.iter().map(|v| v.max(0.0)).collect();
    println!("{:<22} bitwise {}", "fuse relu", run(&fused, false)?.data == expect);
    println!("\n{}", print_kernel(&cache_writes(&fused, "output")?));
    Ok(())
}
