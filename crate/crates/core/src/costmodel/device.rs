use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CostError;

pub const DEVICE_FORMAT_VERSION: u32 = 1;

/// Nominal logic/BRAM constants. No vendor model exists for these; they are
/// placeholders that a profile may override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    #[serde(default = "d_alut_per_lsu")]
    pub alut_per_lsu: u64,
    #[serde(default = "d_bram_blocks_per_lsu")]
    pub bram_blocks_per_lsu: u64,
    #[serde(default = "d_alut_per_loop")]
    pub alut_per_loop: u64,
    #[serde(default = "d_alut_kernel_base")]
    pub alut_kernel_base: u64,
    #[serde(default = "d_bram_block_bits")]
    pub bram_block_bits: u64,
    #[serde(default = "d_fill")]
    pub pipeline_fill_cycles: u64,
    #[serde(default = "d_launch")]
    pub launch_overhead_cycles: u64,
    #[serde(default = "d_cap")]
    pub bram_occupancy_cap: f64,
}

fn d_alut_per_lsu() -> u64 {
    2000
}
fn d_bram_blocks_per_lsu() -> u64 {
    4
}
fn d_alut_per_loop() -> u64 {
    300
}
fn d_alut_kernel_base() -> u64 {
    5000
}
fn d_bram_block_bits() -> u64 {
    20480
}
fn d_fill() -> u64 {
    200
}
fn d_launch() -> u64 {
    10000
}
fn d_cap() -> f64 {
    0.8
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            alut_per_lsu: d_alut_per_lsu(),
            bram_blocks_per_lsu: d_bram_blocks_per_lsu(),
            alut_per_loop: d_alut_per_loop(),
            alut_kernel_base: d_alut_kernel_base(),
            bram_block_bits: d_bram_block_bits(),
            pipeline_fill_cycles: d_fill(),
            launch_overhead_cycles: d_launch(),
            bram_occupancy_cap: d_cap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    #[serde(default = "d_version")]
    pub format_version: u32,
    pub name: String,
    pub aluts: u64,
    pub ffs: u64,
    pub dsps: u64,
    pub bram_bits: u64,
    pub ext_bandwidth_bytes_per_s: f64,
    pub assumed_clock_hz: f64,
    #[serde(default)]
    pub calibration: Calibration,
}

fn d_version() -> u32 {
    DEVICE_FORMAT_VERSION
}

const S10SX_JSON: &str = include_str!("../../../../devices/s10sx.json");

impl DeviceProfile {
    pub fn from_json(text: &str) -> Result<Self, CostError> {
        let d: DeviceProfile =
            serde_json::from_str(text).map_err(|e| CostError::Profile(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn load(path: &Path) -> Result<Self, CostError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CostError::Profile(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The bundled Stratix 10 SX profile.
    pub fn s10sx() -> Self {
        Self::from_json(S10SX_JSON).expect("bundled profile is valid")
    }

    /// Budgets may be zero (a device without that resource); rates and
    /// calibration constants must be positive.
    pub fn validate(&self) -> Result<(), CostError> {
        let bad = |m: &str| Err(CostError::Profile(format!("{}: {m}", self.name)));
        if self.format_version != DEVICE_FORMAT_VERSION {
            return bad(&format!("unsupported format_version {}", self.format_version));
        }
        if self.assumed_clock_hz.is_nan() || self.assumed_clock_hz <= 0.0 {
            return bad("assumed_clock_hz must be positive");
        }
        if self.ext_bandwidth_bytes_per_s.is_nan() || self.ext_bandwidth_bytes_per_s <= 0.0 {
            return bad("ext_bandwidth_bytes_per_s must be positive");
        }
        let c = &self.calibration;
        if c.bram_block_bits == 0 {
            return bad("bram_block_bits must be positive");
        }
        if !(c.bram_occupancy_cap > 0.0 && c.bram_occupancy_cap <= 1.0) {
            return bad("bram_occupancy_cap must be in (0, 1]");
        }
        Ok(())
    }
}

/// Largest unroll factor whose per-cycle element demand stays within the
/// external memory bandwidth.
pub fn bandwidth_cap_factor(device: &DeviceProfile, elem_bytes: usize) -> usize {
    assert!(elem_bytes > 0, "elem_bytes must be positive");
    let bytes_per_cycle = device.ext_bandwidth_bytes_per_s / device.assumed_clock_hz;
    // Tolerate representation error in e.g. 76.8e9 / 250e6.
    (bytes_per_cycle / elem_bytes as f64 + 1e-9).floor() as usize
}
