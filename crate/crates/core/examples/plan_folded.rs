//! Plan MobileNetV1: too large to pipeline, so layers with the same filter
//! size and stride share one parameterized kernel.

use cnnflow::bundled;
use cnnflow::plan::{build_plan, ModeRequest, PlanDump, PlanOptions};

fn main() -> anyhow::Result<()> {
    let g = bundled::mobilenet_v1();
    let dev = bundled::s10sx();
    let p = build_plan(&g, &dev, PlanOptions::default())?;
    println!("mode {} ({})", p.mode, p.decision.as_ref().unwrap().rationale);
    for k in PlanDump::new(&p).kernels {
        println!("  {:<28} params {:?}  layers {}", k.id, k.params, k.layers.len());
    }
    println!("{} kernels, {} invocations", p.kernels.len(), p.invocations.len());

    let forced = build_plan(&g, &dev, PlanOptions { mode: ModeRequest::Pipelined, of_enabled: true });
    println!("forced pipelined: {}", forced.unwrap_err());
    Ok(())
}
