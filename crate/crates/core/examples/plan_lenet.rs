//! Plan LeNet-5: auto mode picks the pipelined form with channels between
//! layers and autorun kernels.

use cnnflow::bundled;
use cnnflow::plan::{build_plan, PlanOptions};

fn main() -> anyhow::Result<()> {
    let p = build_plan(&bundled::lenet5(), &bundled::s10sx(), PlanOptions::default())?;
    let d = p.decision.as_ref().unwrap();
    println!("mode {} ({})", p.mode, d.rationale);
    println!("optimizations {:?}", p.optimizations());
    for k in &p.kernels {
        let q = p.queues.get(&k.id).map_or("autorun".to_string(), |q| format!("queue {q}"));
        println!("  kernel {:<8} {q}", k.id);
    }
    for c in &p.channels {
        println!("  channel {:<20} depth {:>5} ({} -> {})", c.name, c.depth, c.producer, c.consumer);
    }
    for f in &p.factors {
        println!("  {:?} {}.{} = {} of {:?} (limit {:?})", f.opt, f.kernel, f.loop_var, f.chosen, f.candidates, f.limit);
    }
    Ok(())
}
