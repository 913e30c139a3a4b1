use serde::{Deserialize, Serialize};

use super::{LayerKind, LayerOp, LayerSpec, NetError, NetworkGraph, Padding, Shape, INPUT_ID};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// On-disk model description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDocument {
    #[serde(default = "default_version")]
    pub format_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub input_shape: [usize; 3],
    pub layers: Vec<RawLayer>,
}

fn default_version() -> u32 {
    MODEL_FORMAT_VERSION
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawLayer {
    pub id: String,
    pub kind: String,
    #[serde(default)]
    pub attrs: RawLayerAttrs,
    /// Omitted inputs default to the previous layer (or the graph input).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_shape: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawLayerAttrs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub units: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_h: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_w: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub padding: Option<Padding>,
    /// 0/1; convolutions and dense layers default to having a bias.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<u8>,
    /// 0/1; global average pooling over the whole input plane.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pad_top: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pad_bottom: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pad_left: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pad_right: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perm: Option<[usize; 3]>,
}

/// Parses and validates a model document, inferring all shapes.
pub fn parse_network(text: &str) -> Result<NetworkGraph, NetError> {
    let doc: NetworkDocument =
        serde_json::from_str(text).map_err(|e| NetError::Schema(e.to_string()))?;
    doc.into_graph()
}

impl NetworkDocument {
    pub fn into_graph(self) -> Result<NetworkGraph, NetError> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(NetError::Schema(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(NetError::Schema("input_shape dimensions must be positive".into()));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut prev = INPUT_ID.to_string();
        for raw in self.layers {
            let inputs = raw.inputs.clone().unwrap_or_else(|| vec![prev.clone()]);
            let op = raw.to_op()?;
            prev = raw.id.clone();
            layers.push(LayerSpec {
                id: raw.id,
                op,
                inputs,
                weights_shape: raw.weights_shape,
            });
        }
        let name = if self.name.is_empty() { "network".to_string() } else { self.name };
        NetworkGraph::new(name, Shape::new(c, h, w), layers)
    }
}

impl RawLayer {
    fn to_op(&self) -> Result<LayerOp, NetError> {
        let kind = LayerKind::from_name(&self.kind).ok_or_else(|| NetError::UnknownKind {
            layer: self.id.clone(),
            kind: self.kind.clone(),
        })?;
        let a = &self.attrs;
        let need = |v: Option<usize>, name: &str| -> Result<usize, NetError> {
            match v {
                Some(0) => Err(NetError::Schema(format!(
                    "layer '{}': attr '{name}' must be >= 1",
                    self.id
                ))),
                Some(x) => Ok(x),
                None => Err(NetError::Schema(format!(
                    "layer '{}' ({}) is missing attr '{name}'",
                    self.id, self.kind
                ))),
            }
        };
        let flag = |v: Option<u8>, default: bool| -> Result<bool, NetError> {
            match v {
                None => Ok(default),
                Some(0) => Ok(false),
                Some(1) => Ok(true),
                Some(x) => Err(NetError::Schema(format!(
                    "layer '{}': flag attr must be 0 or 1, got {x}",
                    self.id
                ))),
            }
        };
        let padding = a.padding.unwrap_or(Padding::Valid);
        let op = match kind {
            LayerKind::Conv2d => LayerOp::Conv2d {
                filters: need(a.filters, "filters")?,
                kh: need(a.kernel_h, "kernel_h")?,
                kw: need(a.kernel_w, "kernel_w")?,
                stride: need(a.stride.or(Some(1)), "stride")?,
                padding,
                bias: flag(a.bias, true)?,
            },
            LayerKind::DepthwiseConv2d => LayerOp::DepthwiseConv2d {
                kh: need(a.kernel_h, "kernel_h")?,
                kw: need(a.kernel_w, "kernel_w")?,
                stride: need(a.stride.or(Some(1)), "stride")?,
                padding,
                bias: flag(a.bias, true)?,
            },
            LayerKind::Dense => LayerOp::Dense {
                units: need(a.units, "units")?,
                bias: flag(a.bias, true)?,
            },
            LayerKind::Maxpool => LayerOp::Maxpool {
                kh: need(a.kernel_h, "kernel_h")?,
                kw: need(a.kernel_w, "kernel_w")?,
                stride: need(a.stride.or(a.kernel_h), "stride")?,
                padding,
            },
            LayerKind::Avgpool => {
                if flag(a.global, false)? {
                    LayerOp::Avgpool { kh: 0, kw: 0, stride: 1, global: true }
                } else {
                    if padding != Padding::Valid {
                        return Err(NetError::Schema(format!(
                            "layer '{}': avgpool supports valid padding only",
                            self.id
                        )));
                    }
                    LayerOp::Avgpool {
                        kh: need(a.kernel_h, "kernel_h")?,
                        kw: need(a.kernel_w, "kernel_w")?,
                        stride: need(a.stride.or(a.kernel_h), "stride")?,
                        global: false,
                    }
                }
            }
            LayerKind::Relu => LayerOp::Relu,
            LayerKind::Relu6 => LayerOp::Relu6,
            LayerKind::Batchnorm => LayerOp::Batchnorm,
            LayerKind::Add => LayerOp::Add,
            LayerKind::Pad => LayerOp::Pad {
                top: a.pad_top.unwrap_or(0),
                bottom: a.pad_bottom.unwrap_or(0),
                left: a.pad_left.unwrap_or(0),
                right: a.pad_right.unwrap_or(0),
            },
            LayerKind::Flatten => LayerOp::Flatten,
            LayerKind::Transpose => {
                let perm = a.perm.ok_or_else(|| {
                    NetError::Schema(format!("layer '{}' (transpose) is missing attr 'perm'", self.id))
                })?;
                let mut seen = [false; 3];
                for &p in &perm {
                    if p > 2 || std::mem::replace(&mut seen[p], true) {
                        return Err(NetError::Schema(format!(
                            "layer '{}': perm must be a permutation of [0,1,2]",
                            self.id
                        )));
                    }
                }
                LayerOp::Transpose { perm }
            }
        };
        Ok(op)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_relu_layer() {
        let g = parse_network(
            r#"{"input_shape":[3,8,8],"layers":[{"id":"r","kind":"relu","inputs":["input"]}]}"#,
        )
        .unwrap();
        assert_eq!(g.layers.len(), 1);
        assert_eq!(g.shapes["r"], Shape::new(3, 8, 8));
    }

    #[test]
    fn dangling_input() {
        let err = parse_network(
            r#"{"input_shape":[3,8,8],"layers":[
                {"id":"c","kind":"conv2d","attrs":{"filters":4,"kernel_h":3,"kernel_w":3},"inputs":["x9"]}]}"#,
        )
        .unwrap_err();
        assert_eq!(
            err,
            NetError::DanglingInput { layer: "c".into(), input: "x9".into() }
        );
    }

    #[test]
    fn unknown_kind_and_malformed_documents() {
        let err = parse_network(
            r#"{"input_shape":[3,8,8],"layers":[{"id":"s","kind":"softmax"}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, NetError::UnknownKind { .. }));
        assert!(matches!(parse_network("{not json"), Err(NetError::Schema(_))));
        assert!(matches!(
            parse_network(r#"{"input_shape":[3,8],"layers":[]}"#),
            Err(NetError::Schema(_))
        ));
        let missing = parse_network(
            r#"{"input_shape":[3,8,8],"layers":[{"id":"c","kind":"conv2d","attrs":{"kernel_h":3,"kernel_w":3}}]}"#,
        );
        assert!(matches!(missing, Err(NetError::Schema(_))));
        let zero_stride = parse_network(
            r#"{"input_shape":[3,8,8],"layers":[{"id":"c","kind":"conv2d","attrs":{"filters":2,"kernel_h":3,"kernel_w":3,"stride":0}}]}"#,
        );
        assert!(matches!(zero_stride, Err(NetError::Schema(_))));
    }

    #[test]
    fn omitted_inputs_chain_sequentially() {
        let g = parse_network(
            r#"{"input_shape":[2,4,4],"layers":[{"id":"a","kind":"relu"},{"id":"b","kind":"relu6"}]}"#,
        )
        .unwrap();
        assert_eq!(g.layers[0].inputs, vec!["input"]);
        assert_eq!(g.layers[1].inputs, vec!["a"]);
    }
}
