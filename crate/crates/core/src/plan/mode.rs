use serde::Serialize;

use super::{Mode, ModeRequest, PlanError};
use crate::costmodel::DeviceProfile;
use crate::netdef::{LayerOp, NetworkGraph};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeDecision {
    pub requested: ModeRequest,
    pub selected: Mode,
    /// Every layer's output activations plus all parameters, in bits.
    pub onchip_bits: u64,
    pub device_bram_bits: u64,
    pub occupancy_cap: f64,
    pub rationale: String,
}

fn param_elems(op: &LayerOp, in_c: usize) -> usize {
    match *op {
        LayerOp::Conv2d { filters, kh, kw, bias, .. } => filters * in_c * kh * kw + if bias { filters } else { 0 },
        LayerOp::DepthwiseConv2d { kh, kw, bias, .. } => in_c * kh * kw + if bias { in_c } else { 0 },
        LayerOp::Dense { units, bias } => units * in_c + if bias { units } else { 0 },
        LayerOp::Batchnorm => 2 * in_c,
        _ => 0,
    }
}

/// On-chip storage a fully pipelined deployment would need: per-layer
/// activation buffers and weights, 32 bits per element.
pub fn onchip_bits(graph: &NetworkGraph) -> u64 {
    graph
        .layers
        .iter()
        .map(|l| {
            let out = graph.shape_of(&l.id).expect("validated graph").elems();
            let in_c = graph.input_shapes(l)[0].c;
            ((out + param_elems(&l.op, in_c)) * 32) as u64
        })
        .sum()
}

/// Pipelined iff everything fits on chip within the occupancy cap. A forced
/// pipelined request is refused when the estimate exceeds the device.
pub fn select_mode(
    graph: &NetworkGraph,
    device: &DeviceProfile,
    request: ModeRequest,
) -> Result<ModeDecision, PlanError> {
    let bits = onchip_bits(graph);
    let cap = device.calibration.bram_occupancy_cap;
    let budget = (cap * device.bram_bits as f64).floor() as u64;
    let fits = bits <= budget;
    let (selected, rationale) = match request {
        ModeRequest::Auto if fits => (
            Mode::Pipelined,
            format!("on-chip estimate {bits} bits <= {cap} x {} BRAM bits", device.bram_bits),
        ),
        ModeRequest::Auto => (
            Mode::Folded,
            format!("on-chip estimate {bits} bits > {cap} x {} BRAM bits", device.bram_bits),
        ),
        ModeRequest::Pipelined if bits > device.bram_bits => {
            return Err(PlanError::OverrideInfeasible {
                mode: Mode::Pipelined,
                needed_bits: bits,
                available_bits: device.bram_bits,
            })
        }
        ModeRequest::Pipelined => (Mode::Pipelined, format!("forced; on-chip estimate {bits} bits fits BRAM")),
        ModeRequest::Folded => (Mode::Folded, "forced".to_string()),
    };
    Ok(ModeDecision {
        requested: request,
        selected,
        onchip_bits: bits,
        device_bram_bits: device.bram_bits,
        occupancy_cap: cap,
        rationale,
    })
}
