//! Artifact emission: OpenCL C kernels, the host execution plan, build
//! flags and the report, plus the end-to-end compile driver.

mod compile;
mod host;
mod opencl;
mod report;

use thiserror::Error;

use crate::plan::ExecutionPlan;

pub use compile::{
    compile, verify_plan, write_bundle, CompileOptions, Compiled, VERIFY_FLOP_LIMIT, VERIFY_REDUCED_HW,
    VERIFY_TOLERANCE,
};
pub use host::{emit_host_plan, BufferRole, HostBuffer, HostChannel, HostInvocation, HostPlan, HostQueue};
pub use opencl::{emit_kernels, smoke_check};
pub use report::{BuildSection, Report, ReportError, Verification};

pub const EMIT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmitError {
    #[error("cannot emit an invalid plan: {0:?}")]
    InvalidPlan(Vec<String>),
    #[error("emitted source failed the grammar check: {0:?}")]
    Smoke(Vec<String>),
    #[error("i/o error: {0}")]
    Io(String),
}

/// The four artifacts of a successful compile, as text.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionBundle {
    pub kernel_source: String,
    pub host_plan: String,
    pub build_flags: Vec<String>,
    pub report: String,
}

/// `-fp-relaxed -fpc` when relaxed float ordering is on.
pub fn build_flags(plan: &ExecutionPlan) -> Vec<String> {
    if plan.of_enabled {
        vec!["-fp-relaxed".to_string(), "-fpc".to_string()]
    } else {
        Vec::new()
    }
}

/// `build_flags.txt` contents: a version line, then the flags on one line.
pub fn build_flags_text(flags: &[String]) -> String {
    format!("# format_version: {EMIT_FORMAT_VERSION}\n{}\n", flags.join(" "))
}
