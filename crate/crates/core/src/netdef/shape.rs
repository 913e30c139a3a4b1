use std::collections::BTreeMap;

use super::{LayerOp, LayerSpec, NetError, NetworkGraph, Padding, Shape};

/// Output extent of a windowed op along one spatial axis, `None` if the
/// window does not fit.
///
/// `same` follows the usual convention: `ceil(in / stride)` outputs with the
/// total padding split evenly, the extra row going after.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Same => Some(input.div_ceil(stride)),
        Padding::Valid => (input >= k).then(|| (input - k) / stride + 1),
    }
}

/// Implicit zero rows/cols inserted before the input under `same` padding.
pub fn same_pad_before(input: usize, k: usize, stride: usize) -> usize {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(input);
    total / 2
}

fn mismatch(layer: &LayerSpec, detail: String) -> NetError {
    NetError::ShapeMismatch { layer: layer.id.clone(), detail }
}

fn window(
    layer: &LayerSpec,
    s: Shape,
    out_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<Shape, NetError> {
    match (
        conv_out_dim(s.h, kh, stride, padding),
        conv_out_dim(s.w, kw, stride, padding),
    ) {
        (Some(h), Some(w)) => Ok(Shape::new(out_c, h, w)),
        _ => Err(mismatch(layer, format!("{kh}x{kw} window does not fit input {s}"))),
    }
}

fn check_weights(layer: &LayerSpec, expected: &[usize]) -> Result<(), NetError> {
    match &layer.weights_shape {
        Some(ws) if ws.as_slice() != expected => Err(mismatch(
            layer,
            format!("weights_shape {ws:?} does not match expected {expected:?}"),
        )),
        _ => Ok(()),
    }
}

/// Output shape of one layer given its operand shapes.
pub(crate) fn layer_output(layer: &LayerSpec, inputs: &[Shape]) -> Result<Shape, NetError> {
    let s = inputs[0];
    let out = match layer.op {
        LayerOp::Conv2d { filters, kh, kw, stride, padding, .. } => {
            check_weights(layer, &[filters, s.c, kh, kw])?;
            window(layer, s, filters, kh, kw, stride, padding)?
        }
        LayerOp::DepthwiseConv2d { kh, kw, stride, padding, .. } => {
            check_weights(layer, &[s.c, kh, kw])?;
            window(layer, s, s.c, kh, kw, stride, padding)?
        }
        LayerOp::Dense { units, .. } => {
            if s.h != 1 || s.w != 1 {
                return Err(mismatch(
                    layer,
                    format!("dense expects a flattened (N,1,1) input, got {s}"),
                ));
            }
            check_weights(layer, &[units, s.c])?;
            Shape::new(units, 1, 1)
        }
        LayerOp::Maxpool { kh, kw, stride, padding } => {
            window(layer, s, s.c, kh, kw, stride, padding)?
        }
        LayerOp::Avgpool { global: true, .. } => Shape::new(s.c, 1, 1),
        LayerOp::Avgpool { kh, kw, stride, .. } => {
            window(layer, s, s.c, kh, kw, stride, Padding::Valid)?
        }
        LayerOp::Relu | LayerOp::Relu6 | LayerOp::Batchnorm => s,
        LayerOp::Add => {
            if inputs[1] != s {
                return Err(mismatch(
                    layer,
                    format!("add operands differ: {s} vs {}", inputs[1]),
                ));
            }
            s
        }
        LayerOp::Pad { top, bottom, left, right } => {
            Shape::new(s.c, s.h + top + bottom, s.w + left + right)
        }
        LayerOp::Flatten => Shape::new(s.elems(), 1, 1),
        LayerOp::Transpose { perm } => {
            let d = s.dims();
            Shape::new(d[perm[0]], d[perm[1]], d[perm[2]])
        }
    };
    Ok(out)
}

/// Output shape of every layer, keyed by id. The graph's layers must already
/// be in topological order.
pub fn infer_shapes(graph: &NetworkGraph) -> Result<BTreeMap<String, Shape>, NetError> {
    let mut shapes: BTreeMap<String, Shape> = BTreeMap::new();
    for layer in &graph.layers {
        let inputs: Vec<Shape> = layer
            .inputs
            .iter()
            .map(|i| {
                if i == super::INPUT_ID {
                    Ok(graph.input_shape)
                } else {
                    shapes.get(i).copied().ok_or_else(|| NetError::DanglingInput {
                        layer: layer.id.clone(),
                        input: i.clone(),
                    })
                }
            })
            .collect::<Result<_, _>>()?;
        let out = layer_output(layer, &inputs)?;
        shapes.insert(layer.id.clone(), out);
    }
    Ok(shapes)
}
