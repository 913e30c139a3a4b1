//! Resource and throughput estimates for the bundled networks.

use cnnflow::bundled;
use cnnflow::costmodel::{bandwidth_cap_factor, estimate_resources, estimate_throughput, fits, ELEM_BYTES};
use cnnflow::plan::{build_plan, PlanOptions};

fn main() -> anyhow::Result<()> {
    let dev = bundled::s10sx();
    println!("{}: bandwidth cap {} floats/cycle", dev.name, bandwidth_cap_factor(&dev, ELEM_BYTES));
    for g in [bundled::lenet5(), bundled::mobilenet_v1(), bundled::resnet34()] {
        let p = build_plan(&g, &dev, PlanOptions::default())?;
        let r = estimate_resources(&p, &dev);
        let fit = fits(&r, &dev);
        let t = estimate_throughput(&p, &dev)?;
        println!(
            "{:<12} {:<9} DSPs {:>5}  BRAM bits {:>9}  ALUTs {:>7}  LSUs {:>3}  fits {}  {:.1} fps",
            g.name,
            p.mode.to_string(),
            r.dsps,
            r.bram_bits,
            r.aluts,
            r.lsus.len(),
            fit.fits,
            t.fps
        );
    }
    Ok(())
}
