//! Network descriptions: parsing, validation, shape inference and operation
//! counting.
//!
//! Tensors are channels-first `(C, H, W)` with an implicit batch of one.
//! Layout changes are explicit `transpose` layers.

mod flops;
mod parse;
mod shape;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use flops::{count_flops, flop_share, FlopReport, LayerCount};
pub use parse::{parse_network, NetworkDocument, RawLayer, RawLayerAttrs, MODEL_FORMAT_VERSION};
pub use shape::{conv_out_dim, infer_shapes, same_pad_before};
pub(crate) use shape::layer_output;

/// Reserved layer id naming the graph input tensor.
pub const INPUT_ID: &str = "input";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("malformed model document: {0}")]
    Schema(String),
    #[error("layer '{layer}': unknown layer kind '{kind}'")]
    UnknownKind { layer: String, kind: String },
    #[error("layer '{layer}' references unknown input '{input}'")]
    DanglingInput { layer: String, input: String },
    #[error("duplicate layer id '{0}'")]
    DuplicateId(String),
    #[error("layer graph contains a cycle through '{0}'")]
    Cycle(String),
    #[error("layer '{layer}': shape mismatch: {detail}")]
    ShapeMismatch { layer: String, detail: String },
}

/// A channels-first tensor shape `(C, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub fn elems(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    DepthwiseConv2d,
    Dense,
    Maxpool,
    Avgpool,
    Relu,
    Relu6,
    Batchnorm,
    Add,
    Pad,
    Flatten,
    Transpose,
}

impl LayerKind {
    pub const ALL: [LayerKind; 12] = [
        LayerKind::Conv2d,
        LayerKind::DepthwiseConv2d,
        LayerKind::Dense,
        LayerKind::Maxpool,
        LayerKind::Avgpool,
        LayerKind::Relu,
        LayerKind::Relu6,
        LayerKind::Batchnorm,
        LayerKind::Add,
        LayerKind::Pad,
        LayerKind::Flatten,
        LayerKind::Transpose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::DepthwiseConv2d => "depthwise_conv2d",
            LayerKind::Dense => "dense",
            LayerKind::Maxpool => "maxpool",
            LayerKind::Avgpool => "avgpool",
            LayerKind::Relu => "relu",
            LayerKind::Relu6 => "relu6",
            LayerKind::Batchnorm => "batchnorm",
            LayerKind::Add => "add",
            LayerKind::Pad => "pad",
            LayerKind::Flatten => "flatten",
            LayerKind::Transpose => "transpose",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        LayerKind::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Layers whose arithmetic is multiply-accumulate.
    pub fn is_mac(self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::Dense
        )
    }

    /// Single-input elementwise post-ops that can be fused into a producer.
    pub fn is_post_op(self) -> bool {
        matches!(self, LayerKind::Relu | LayerKind::Relu6 | LayerKind::Batchnorm)
    }

    /// Pure data-movement kernels (no arithmetic, never unrolled or cached).
    pub fn is_data_movement(self) -> bool {
        matches!(self, LayerKind::Pad | LayerKind::Flatten | LayerKind::Transpose)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

/// Typed, validated layer parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerOp {
    Conv2d { filters: usize, kh: usize, kw: usize, stride: usize, padding: Padding, bias: bool },
    DepthwiseConv2d { kh: usize, kw: usize, stride: usize, padding: Padding, bias: bool },
    Dense { units: usize, bias: bool },
    Maxpool { kh: usize, kw: usize, stride: usize, padding: Padding },
    /// `global` pools collapse the whole spatial extent; `kh`/`kw` are unused.
    Avgpool { kh: usize, kw: usize, stride: usize, global: bool },
    Relu,
    Relu6,
    Batchnorm,
    Add,
    Pad { top: usize, bottom: usize, left: usize, right: usize },
    Flatten,
    /// Output axis `i` takes input axis `perm[i]`.
    Transpose { perm: [usize; 3] },
}

impl LayerOp {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOp::Conv2d { .. } => LayerKind::Conv2d,
            LayerOp::DepthwiseConv2d { .. } => LayerKind::DepthwiseConv2d,
            LayerOp::Dense { .. } => LayerKind::Dense,
            LayerOp::Maxpool { .. } => LayerKind::Maxpool,
            LayerOp::Avgpool { .. } => LayerKind::Avgpool,
            LayerOp::Relu => LayerKind::Relu,
            LayerOp::Relu6 => LayerKind::Relu6,
            LayerOp::Batchnorm => LayerKind::Batchnorm,
            LayerOp::Add => LayerKind::Add,
            LayerOp::Pad { .. } => LayerKind::Pad,
            LayerOp::Flatten => LayerKind::Flatten,
            LayerOp::Transpose { .. } => LayerKind::Transpose,
        }
    }

    pub fn arity(&self) -> usize {
        if matches!(self, LayerOp::Add) {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: String,
    pub op: LayerOp,
    pub inputs: Vec<String>,
    pub weights_shape: Option<Vec<usize>>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, op: LayerOp, inputs: &[&str]) -> Self {
        LayerSpec {
            id: id.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            weights_shape: None,
        }
    }

    pub fn kind(&self) -> LayerKind {
        self.op.kind()
    }

    /// Filter-size/stride key used to group layers onto shared hardware.
    pub fn group_key(&self) -> GroupKey {
        let kind = self.kind();
        let (kh, kw, stride) = match self.op {
            LayerOp::Conv2d { kh, kw, stride, .. }
            | LayerOp::DepthwiseConv2d { kh, kw, stride, .. }
            | LayerOp::Maxpool { kh, kw, stride, .. } => (kh, kw, stride),
            LayerOp::Avgpool { global: true, .. } => (0, 0, 0),
            LayerOp::Avgpool { kh, kw, stride, .. } => (kh, kw, stride),
            _ => (1, 1, 1),
        };
        GroupKey { kind, kh, kw, stride }
    }
}

/// `(kind, kernel_h, kernel_w, stride)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupKey {
    pub kind: LayerKind,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl GroupKey {
    pub fn new(kind: LayerKind, kh: usize, kw: usize, stride: usize) -> Self {
        GroupKey { kind, kh, kw, stride }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}x{}_s{}", self.kind, self.kh, self.kw, self.stride)
    }
}

impl Serialize for GroupKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// A validated layer DAG in topological order with inferred output shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub name: String,
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
    pub shapes: BTreeMap<String, Shape>,
}

impl NetworkGraph {
    /// Validates `layers` (ids, inputs, acyclicity) and infers shapes.
    ///
    /// Layers are reordered topologically; among ready layers the original
    /// order wins, so an already-sorted list is preserved exactly.
    pub fn new(
        name: impl Into<String>,
        input_shape: Shape,
        layers: Vec<LayerSpec>,
    ) -> Result<Self, NetError> {
        let layers = topo_sort(layers)?;
        let mut graph = NetworkGraph {
            name: name.into(),
            input_shape,
            layers,
            shapes: BTreeMap::new(),
        };
        graph.shapes = infer_shapes(&graph)?;
        Ok(graph)
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Output shape of a layer, or the graph input shape for [`INPUT_ID`].
    pub fn shape_of(&self, id: &str) -> Option<Shape> {
        if id == INPUT_ID {
            Some(self.input_shape)
        } else {
            self.shapes.get(id).copied()
        }
    }

    /// Input shapes of a layer in operand order.
    pub fn input_shapes(&self, layer: &LayerSpec) -> Vec<Shape> {
        layer
            .inputs
            .iter()
            .map(|i| self.shape_of(i).expect("validated graph"))
            .collect()
    }

    /// Layers that read `id`, in graph order.
    pub fn consumers(&self, id: &str) -> Vec<&LayerSpec> {
        self.layers
            .iter()
            .filter(|l| l.inputs.iter().any(|i| i == id))
            .collect()
    }

    /// The network output: the last layer nobody consumes.
    pub fn output_id(&self) -> &str {
        self.layers
            .iter()
            .rev()
            .find(|l| self.consumers(&l.id).is_empty())
            .map(|l| l.id.as_str())
            .unwrap_or(INPUT_ID)
    }

    pub fn output_shape(&self) -> Shape {
        self.shape_of(self.output_id()).expect("validated graph")
    }

    /// The same network re-validated for a different input resolution.
    pub fn with_input_shape(&self, input_shape: Shape) -> Result<Self, NetError> {
        NetworkGraph::new(self.name.clone(), input_shape, self.layers.clone())
    }
}

fn topo_sort(layers: Vec<LayerSpec>) -> Result<Vec<LayerSpec>, NetError> {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, l) in layers.iter().enumerate() {
        if l.id == INPUT_ID || index.insert(l.id.as_str(), i).is_some() {
            return Err(NetError::DuplicateId(l.id.clone()));
        }
    }
    let mut indegree = vec![0usize; layers.len()];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); layers.len()];
    for (i, l) in layers.iter().enumerate() {
        if l.inputs.len() != l.op.arity() {
            return Err(NetError::Schema(format!(
                "layer '{}' ({}) takes {} input(s), got {}",
                l.id,
                l.kind(),
                l.op.arity(),
                l.inputs.len()
            )));
        }
        for input in &l.inputs {
            if input == INPUT_ID {
                continue;
            }
            let Some(&src) = index.get(input.as_str()) else {
                return Err(NetError::DanglingInput {
                    layer: l.id.clone(),
                    input: input.clone(),
                });
            };
            indegree[i] += 1;
            users[src].push(i);
        }
    }
    let mut done = vec![false; layers.len()];
    let mut order = Vec::with_capacity(layers.len());
    while order.len() < layers.len() {
        let Some(next) = (0..layers.len()).find(|&i| !done[i] && indegree[i] == 0) else {
            let stuck = (0..layers.len()).find(|&i| !done[i]).expect("unfinished layer");
            return Err(NetError::Cycle(layers[stuck].id.clone()));
        };
        done[next] = true;
        for &u in &users[next] {
            indegree[u] -= 1;
        }
        order.push(next);
    }
    let mut slots: Vec<Option<LayerSpec>> = layers.into_iter().map(Some).collect();
    Ok(order.into_iter().map(|i| slots[i].take().unwrap()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topo_order_is_stable_and_handles_forward_references() {
        let layers = vec![
            LayerSpec::new("b", LayerOp::Relu, &["a"]),
            LayerSpec::new("a", LayerOp::Relu, &["input"]),
            LayerSpec::new("c", LayerOp::Add, &["a", "b"]),
        ];
        let g = NetworkGraph::new("t", Shape::new(2, 3, 3), layers).unwrap();
        let ids: Vec<_> = g.layers.iter().map(|l| l.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(g.output_id(), "c");
    }

    #[test]
    fn cycles_are_rejected() {
        let layers = vec![
            LayerSpec::new("a", LayerOp::Relu, &["b"]),
            LayerSpec::new("b", LayerOp::Relu, &["a"]),
        ];
        let err = NetworkGraph::new("t", Shape::new(1, 1, 1), layers).unwrap_err();
        assert!(matches!(err, NetError::Cycle(_)));
    }

    #[test]
    fn duplicate_and_reserved_ids_are_rejected() {
        let layers = vec![
            LayerSpec::new("a", LayerOp::Relu, &["input"]),
            LayerSpec::new("a", LayerOp::Relu, &["input"]),
        ];
        assert_eq!(
            NetworkGraph::new("t", Shape::new(1, 1, 1), layers).unwrap_err(),
            NetError::DuplicateId("a".into())
        );
        let layers = vec![LayerSpec::new("input", LayerOp::Relu, &["input"])];
        assert!(NetworkGraph::new("t", Shape::new(1, 1, 1), layers).is_err());
    }

    #[test]
    fn group_keys_distinguish_stride() {
        let a = LayerSpec::new(
            "a",
            LayerOp::DepthwiseConv2d { kh: 3, kw: 3, stride: 1, padding: Padding::Same, bias: false },
            &["input"],
        );
        let b = LayerSpec::new(
            "b",
            LayerOp::DepthwiseConv2d { kh: 3, kw: 3, stride: 2, padding: Padding::Same, bias: false },
            &["input"],
        );
        assert_ne!(a.group_key(), b.group_key());
        assert_eq!(a.group_key().to_string(), "depthwise_conv2d_3x3_s1");
    }
}
