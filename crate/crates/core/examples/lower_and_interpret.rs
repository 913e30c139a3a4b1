//! Lower one layer to a loop nest and run it in the reference interpreter.

use cnnflow::loopir::{interpret_kernel, lower_layer, print_kernel, synth_kernel_inputs, Bindings, InterpOptions};
use cnnflow::netdef::{LayerOp, LayerSpec, Padding, Shape};

fn main() -> anyhow::Result<()> {
    let conv = LayerSpec::new(
        "conv",
        LayerOp::Conv2d { filters: 4, kh: 3, kw: 3, stride: 1, padding: Padding::Same, bias: true },
        &["input"],
    );
    let k = lower_layer(&conv, &[Shape::new(2, 6, 6)])?;
    println!("{}", print_kernel(&k));

    let none = Bindings::new();
    let inputs = synth_kernel_inputs(&k, &none, 0)?;
    let out = interpret_kernel(&k, &none, &inputs, InterpOptions::default())?;
    let y = &out.outputs["output"];
    println!("output {:?}, first row {:?}", y.shape, &y.data[..6]);
    println!("MACs {}  elementwise {}  steps {}", out.stats.macs, out.stats.elem_ops, out.stats.steps);
    Ok(())
}
