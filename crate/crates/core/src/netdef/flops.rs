use std::collections::BTreeMap;

use serde::Serialize;

use super::{GroupKey, LayerKind, LayerOp, NetworkGraph};

/// Operation counts for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub kind: LayerKind,
    pub key: GroupKey,
    pub macs: u64,
    /// Non-MAC arithmetic: activations, batchnorm, adds, pooling reductions.
    pub elem_ops: u64,
    /// `2 * macs + elem_ops`.
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub per_layer: BTreeMap<String, LayerCount>,
    pub total_macs: u64,
    pub total_elem_ops: u64,
    pub total_flops: u64,
    /// Fraction of all MACs per group key; MAC-bearing layers only.
    pub share_by_key: BTreeMap<GroupKey, f64>,
}

impl FlopReport {
    pub fn share(&self, key: &GroupKey) -> f64 {
        self.share_by_key.get(key).copied().unwrap_or(0.0)
    }
}

pub(crate) fn layer_count(graph: &NetworkGraph, id: &str) -> LayerCount {
    let layer = graph.layer(id).expect("layer in graph");
    let ins = graph.input_shapes(layer);
    let out = graph.shapes[id];
    let oe = out.elems() as u64;
    let (macs, elem_ops) = match layer.op {
        LayerOp::Conv2d { filters, kh, kw, .. } => {
            ((filters * ins[0].c * kh * kw * out.h * out.w) as u64, 0)
        }
        LayerOp::DepthwiseConv2d { kh, kw, .. } => ((out.c * kh * kw * out.h * out.w) as u64, 0),
        LayerOp::Dense { units, .. } => ((units * ins[0].c) as u64, 0),
        LayerOp::Maxpool { kh, kw, .. } => (0, oe * (kh * kw) as u64),
        LayerOp::Avgpool { global: true, .. } => (0, oe * (ins[0].h * ins[0].w + 1) as u64),
        LayerOp::Avgpool { kh, kw, .. } => (0, oe * (kh * kw + 1) as u64),
        LayerOp::Relu | LayerOp::Relu6 | LayerOp::Batchnorm | LayerOp::Add => (0, oe),
        LayerOp::Pad { .. } | LayerOp::Flatten | LayerOp::Transpose { .. } => (0, 0),
    };
    LayerCount {
        kind: layer.kind(),
        key: layer.group_key(),
        macs,
        elem_ops,
        flops: 2 * macs + elem_ops,
    }
}

/// Counts MACs and floating-point operations. Bias additions are folded into
/// accumulator initialisation and not counted.
pub fn count_flops(graph: &NetworkGraph) -> FlopReport {
    let mut per_layer = BTreeMap::new();
    let mut macs_by_key: BTreeMap<GroupKey, u64> = BTreeMap::new();
    let (mut total_macs, mut total_elem_ops) = (0u64, 0u64);
    for layer in &graph.layers {
        let c = layer_count(graph, &layer.id);
        total_macs += c.macs;
        total_elem_ops += c.elem_ops;
        if c.macs > 0 {
            *macs_by_key.entry(c.key).or_default() += c.macs;
        }
        per_layer.insert(layer.id.clone(), c);
    }
    let share_by_key = macs_by_key
        .into_iter()
        .map(|(k, m)| (k, m as f64 / total_macs as f64))
        .collect();
    FlopReport {
        per_layer,
        total_macs,
        total_elem_ops,
        total_flops: 2 * total_macs + total_elem_ops,
        share_by_key,
    }
}

/// MAC share of the layers matching `key`; 0 for absent keys.
pub fn flop_share(graph: &NetworkGraph, key: &GroupKey) -> f64 {
    count_flops(graph).share(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::{LayerSpec, Padding, Shape};

    #[test]
    fn small_conv_counts() {
        let op = LayerOp::Conv2d {
            filters: 4, kh: 3, kw: 3, stride: 1, padding: Padding::Same, bias: true,
        };
        let g = NetworkGraph::new("t", Shape::new(3, 8, 8), vec![LayerSpec::new("c", op, &["input"])])
            .unwrap();
        let r = count_flops(&g);
        assert_eq!(r.per_layer["c"].macs, 6912);
        assert_eq!(r.total_flops, 13824);
        let key = g.layers[0].group_key();
        assert_eq!(flop_share(&g, &key), 1.0);
        let other = GroupKey::new(LayerKind::Conv2d, 1, 1, 1);
        assert_eq!(flop_share(&g, &other), 0.0);
    }

    #[test]
    fn pooling_and_elementwise_ops() {
        let layers = vec![
            LayerSpec::new("r", LayerOp::Relu, &["input"]),
            LayerSpec::new(
                "m",
                LayerOp::Maxpool { kh: 2, kw: 2, stride: 2, padding: Padding::Valid },
                &["r"],
            ),
            LayerSpec::new("g", LayerOp::Avgpool { kh: 0, kw: 0, stride: 1, global: true }, &["m"]),
        ];
        let g = NetworkGraph::new("t", Shape::new(2, 4, 4), layers).unwrap();
        let r = count_flops(&g);
        assert_eq!(r.per_layer["r"].elem_ops, 32);
        assert_eq!(r.per_layer["m"].elem_ops, 8 * 4);
        assert_eq!(r.per_layer["g"].elem_ops, 2 * 5);
        assert_eq!(r.total_macs, 0);
        assert!(r.share_by_key.is_empty());
    }
}
