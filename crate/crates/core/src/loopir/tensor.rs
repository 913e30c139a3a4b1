use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IrError;

/// A dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn new(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data/shape mismatch");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn elems(&self) -> usize {
        self.data.len()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// How a synthesized tensor's values are distributed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TensorRole {
    /// Network input, uniform in `[0, 1)`.
    Input,
    /// He-uniform in `±sqrt(6 / fan_in)`.
    Weights { fan_in: usize },
    /// Uniform in `±0.05`.
    Bias,
    /// Batchnorm scale, uniform in `[0.8, 1.2)`.
    Scale,
    /// Batchnorm shift, uniform in `±0.1`.
    Shift,
}

impl TensorRole {
    /// Role implied by a global tensor name (`w:<layer>:<role>` or `act:*`).
    pub fn from_name(name: &str, shape: &[usize]) -> Self {
        match name.rsplit(':').next() {
            Some("weights") if name.starts_with("w:") => {
                TensorRole::Weights { fan_in: shape.iter().skip(1).product::<usize>().max(1) }
            }
            Some("bias") if name.starts_with("w:") => TensorRole::Bias,
            Some("scale") if name.starts_with("w:") => TensorRole::Scale,
            Some("shift") if name.starts_with("w:") => TensorRole::Shift,
            _ => TensorRole::Input,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

/// Element `i` of stream `(seed, name)` as a uniform value in `[0, 1)`.
/// Counter-based: any element can be computed independently.
pub fn uniform_at(seed: u64, name: &str, i: u64) -> f64 {
    let key = splitmix64(seed ^ fnv1a(name));
    (splitmix64(key.wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15))) >> 11) as f64
        / (1u64 << 53) as f64
}

/// Deterministic tensor named `name` drawn for `seed`.
pub fn synth_tensor(seed: u64, name: &str, shape: &[usize], role: TensorRole) -> Tensor {
    let n: usize = shape.iter().product();
    let (lo, hi) = match role {
        TensorRole::Input => (0.0, 1.0),
        TensorRole::Weights { fan_in } => {
            let b = (6.0 / fan_in as f64).sqrt();
            (-b, b)
        }
        TensorRole::Bias => (-0.05, 0.05),
        TensorRole::Scale => (0.8, 1.2),
        TensorRole::Shift => (-0.1, 0.1),
    };
    let data = (0..n as u64)
        .map(|i| (lo + (hi - lo) * uniform_at(seed, name, i)) as f32)
        .collect();
    Tensor { shape: shape.to_vec(), data }
}

/// The network input for `seed`.
pub fn synth_input(seed: u64, shape: &[usize]) -> Tensor {
    synth_tensor(seed, "act:input", shape, TensorRole::Input)
}

/// Elements below this fraction of the reference's largest magnitude are
/// compared against that floor instead of their own magnitude.
pub const RELATIVE_FLOOR: f32 = 1e-2;

/// Largest relative error of `actual` against `expected`, where each
/// element's scale is `max(|expected_i|, RELATIVE_FLOOR * max|expected|)`.
pub fn compare_tensors(actual: &Tensor, expected: &Tensor) -> Result<f32, String> {
    if actual.shape != expected.shape {
        return Err(format!("shape {:?} vs {:?}", actual.shape, expected.shape));
    }
    let floor = (expected.max_abs() * RELATIVE_FLOOR).max(f32::MIN_POSITIVE);
    let mut worst = 0.0f32;
    for (a, e) in actual.data.iter().zip(&expected.data) {
        if a.is_nan() || e.is_nan() {
            return Err("NaN in tensor".into());
        }
        if a == e {
            continue;
        }
        let err = (a - e).abs() / e.abs().max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    dtype: String,
    shape: Vec<usize>,
}

/// Writes `<stem>.bin` (little-endian f32) and `<stem>.json` (shape).
pub fn write_tensor(stem: &Path, t: &Tensor) -> Result<(), IrError> {
    let io = |e: std::io::Error| IrError::Io(e.to_string());
    let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(stem.with_extension("bin"), bytes).map_err(io)?;
    let side = Sidecar { format_version: 1, dtype: "f32".into(), shape: t.shape.clone() };
    let json = serde_json::to_string_pretty(&side).map_err(|e| IrError::Io(e.to_string()))?;
    std::fs::write(stem.with_extension("json"), json + "\n").map_err(io)
}

pub fn read_tensor(stem: &Path) -> Result<Tensor, IrError> {
    let io = |e: std::io::Error| IrError::Io(e.to_string());
    let side: Sidecar = serde_json::from_str(
        &std::fs::read_to_string(stem.with_extension("json")).map_err(io)?,
    )
    .map_err(|e| IrError::Io(e.to_string()))?;
    if side.dtype != "f32" {
        return Err(IrError::Io(format!("unsupported dtype {}", side.dtype)));
    }
    let bytes = std::fs::read(stem.with_extension("bin")).map_err(io)?;
    let n: usize = side.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(IrError::Io(format!("expected {} bytes, found {}", n * 4, bytes.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor { shape: side.shape, data })
}
