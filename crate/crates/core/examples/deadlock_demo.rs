//! A fork that reconverges: `p` feeds both a 3x3 maxpool and, directly, the
//! add that joins them. With a one-element bypass channel the pool starves
//! and the pipeline deadlocks; the planner's depths let it complete.

use cnnflow::bundled;
use cnnflow::loopir::{interpret_plan, synth_input, DEFAULT_MAX_STEPS};
use cnnflow::netdef::parse_network;
use cnnflow::plan::{build_plan, reference_plan, ModeRequest, PlanOptions};

const NET: &str = r#"{
  "format_version": 1,
  "name": "fork",
  "input_shape": [2, 4, 4],
  "layers": [
    {"id": "p", "kind": "relu", "inputs": ["input"]},
    {"id": "a", "kind": "maxpool", "attrs": {"kernel_h": 3, "kernel_w": 3, "stride": 1, "padding": "same"}, "inputs": ["p"]},
    {"id": "c", "kind": "add", "inputs": ["a", "p"]}
  ]
}"#;

fn main() -> anyhow::Result<()> {
    let g = parse_network(NET)?;
    let p = build_plan(&g, &bundled::s10sx(), PlanOptions { mode: ModeRequest::Pipelined, of_enabled: false })?;
    let w = reference_plan(&g)?.synth_weights(0)?;
    let x = synth_input(0, &g.input_shape.dims());
    for c in &p.channels {
        println!("{:<14} depth {}", c.name, c.depth);
    }
    let bypass = p.channels.iter().position(|c| c.producer == "p" && c.consumer == "c").unwrap();
    let mut shallow = p.clone();
    shallow.channels[bypass].depth = 1;
    match interpret_plan(&shallow, &x, &w, DEFAULT_MAX_STEPS) {
        Err(e) => println!("bypass depth 1: {e}"),
        Ok(_) => println!("bypass depth 1: completed"),
    }
    let out = interpret_plan(&p, &x, &w, DEFAULT_MAX_STEPS)?;
    println!("planned depths: completed, {} elements out", out.output.elems());
    Ok(())
}
