use serde::Serialize;

use super::EMIT_FORMAT_VERSION;
use crate::costmodel::{FitReport, ResourceEstimate, ThroughputEstimate};
use crate::netdef::FlopReport;
use crate::plan::{FactorChoice, ModeDecision, ModeRequest, PlanDump};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildSection {
    pub of_enabled: bool,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verification {
    /// Input shape the check ran at (reduced for large networks).
    pub input_shape: [usize; 3],
    pub reduced: bool,
    pub seed: u64,
    pub max_rel_err: f32,
    pub tolerance: f32,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportError {
    pub kind: String,
    pub message: String,
    /// Resource or rule that failed, when there is one (e.g. `bram_bits`).
    pub constraint: Option<String>,
}

/// Everything the compiler decided and estimated. Numbers are copied from
/// the module outputs unchanged.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub format_version: u32,
    pub network: String,
    pub device: String,
    pub requested_mode: ModeRequest,
    pub status: &'static str,
    pub error: Option<ReportError>,
    pub mode: Option<ModeDecision>,
    pub optimizations: Vec<&'static str>,
    pub flops: FlopReport,
    pub plan: Option<PlanDump>,
    pub factors: Vec<FactorChoice>,
    pub resources: Option<ResourceEstimate>,
    pub fit: Option<FitReport>,
    pub throughput: Option<ThroughputEstimate>,
    pub build: BuildSection,
    pub verification: Option<Verification>,
}

impl Report {
    pub fn new(network: &str, device: &str, requested: ModeRequest, flops: FlopReport, build: BuildSection) -> Self {
        Report {
            format_version: EMIT_FORMAT_VERSION,
            network: network.to_string(),
            device: device.to_string(),
            requested_mode: requested,
            status: "ok",
            error: None,
            mode: None,
            optimizations: Vec::new(),
            flops,
            plan: None,
            factors: Vec::new(),
            resources: None,
            fit: None,
            throughput: None,
            build,
            verification: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
