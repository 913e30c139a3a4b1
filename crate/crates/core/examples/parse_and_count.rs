//! Parse a network description, infer shapes and count FLOPs.
//!
//! cargo run --example parse_and_count [model.json]

use cnnflow::bundled;
use cnnflow::netdef::{count_flops, parse_network};

fn main() -> anyhow::Result<()> {
    let g = match std::env::args().nth(1) {
        Some(path) => parse_network(&std::fs::read_to_string(path)?)?,
        None => bundled::lenet5(),
    };
    println!("{} input {:?}", g.name, g.input_shape.dims());
    for l in &g.layers {
        println!("  {:<12} {:<18} -> {:?}", l.id, l.kind().name(), g.shape_of(&l.id).unwrap().dims());
    }
    let f = count_flops(&g);
    println!("MACs {}  elementwise {}  FLOPs {}", f.total_macs, f.total_elem_ops, f.total_flops);
    for (key, share) in &f.share_by_key {
        println!("  {key:<28} {:6.2}%", share * 100.0);
    }
    Ok(())
}
