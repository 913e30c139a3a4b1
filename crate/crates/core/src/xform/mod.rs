//! Kernel schedule transformations: unrolling, strip-mining, tiling,
//! post-op fusion, cached writes and kernel parameterization.
//!
//! Every transformation is a pure `&KernelIR -> KernelIR` function that
//! preserves interpreter semantics and records itself in the kernel history.

mod cache;
mod fuse;
mod loops;
mod param;
mod schedule;

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

use crate::loopir::IrError;

pub use cache::cache_writes;
pub use fuse::fuse_postop;
pub use loops::{strip_mine, strip_mine_symbolic, tile, tile_symbolic, unroll, unroll_full};
pub use param::{parameterize_group, ParamGroup, ParamInvocation};
pub use schedule::{apply_schedule, apply_step, Schedule, SCHEDULE_FORMAT_VERSION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum XformError {
    #[error("kernel '{kernel}' has no loop '{var}'")]
    UnknownLoop { kernel: String, var: String },
    #[error("kernel '{kernel}' has no buffer '{buffer}'")]
    UnknownBuffer { kernel: String, buffer: String },
    #[error("loop '{var}' has symbolic extent {extent}")]
    SymbolicExtent { var: String, extent: String },
    #[error("loop '{var}' has extent {extent}; partial unroll by {factor} needs strip_mine")]
    PartialUnrollRequested { var: String, extent: usize, factor: usize },
    #[error("loop '{var}' extent {extent} is not divisible by {factor}")]
    NonDivisible { var: String, extent: usize, factor: usize },
    #[error("factor must be >= 1 (loop '{var}')")]
    ZeroFactor { var: String },
    #[error("loops are not perfectly nested: {0}")]
    NotPerfectlyNested(String),
    #[error("cannot fuse: {0}")]
    FusionMismatch(String),
    #[error("no accumulation pattern: {0}")]
    NoAccumulationPattern(String),
    #[error("group key mismatch: expected {expected}, kernel '{kernel}' has {found}")]
    KeyMismatch { kernel: String, expected: String, found: String },
    #[error("kernel '{kernel}' diverges from the group's parameterized form: {detail}")]
    StructuralDivergence { kernel: String, detail: String },
    #[error("step not applicable here: {0}")]
    NotApplicable(String),
    #[error(transparent)]
    Ir(#[from] IrError),
}

/// One schedule step, as recorded in kernel history and schedule files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum XformStep {
    UnrollFull {
        #[serde(rename = "loop")]
        var: String,
    },
    StripMine {
        #[serde(rename = "loop")]
        var: String,
        factor: usize,
    },
    Tile {
        loops: Vec<String>,
        factors: Vec<usize>,
    },
    /// Fuses the elementwise kernel of layer `post` into this kernel.
    FusePostOp {
        post: String,
    },
    CacheWrites {
        buffer: String,
    },
    Parameterize {
        key: String,
    },
}

impl XformStep {
    /// Table abbreviation of the optimization this step implements.
    pub fn abbrev(&self) -> &'static str {
        match self {
            XformStep::UnrollFull { .. } => "LU",
            XformStep::StripMine { .. } => "LU",
            XformStep::Tile { .. } => "LT",
            XformStep::FusePostOp { .. } => "LF",
            XformStep::CacheWrites { .. } => "CW",
            XformStep::Parameterize { .. } => "PK",
        }
    }
}

impl fmt::Display for XformStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            XformStep::UnrollFull { var } => write!(f, "unroll_full({var})"),
            XformStep::StripMine { var, factor } => write!(f, "strip_mine({var}, {factor})"),
            XformStep::Tile { loops, factors } => write!(f, "tile({loops:?}, {factors:?})"),
            XformStep::FusePostOp { post } => write!(f, "fuse_postop({post})"),
            XformStep::CacheWrites { buffer } => write!(f, "cache_writes({buffer})"),
            XformStep::Parameterize { key } => write!(f, "parameterize({key})"),
        }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::loopir::{interpret_kernel, synth_kernel_inputs, Bindings, InterpOptions, KernelIR, Tensor};

    /// Runs a kernel on synthesized inputs and returns its `output` buffer.
    pub fn run_with(k: &KernelIR, bindings: &Bindings, seed: u64) -> Tensor {
        let ins = synth_kernel_inputs(k, bindings, seed).unwrap();
        interpret_kernel(k, bindings, &ins, InterpOptions::default()).unwrap().outputs["output"].clone()
    }

    pub fn run_const(k: &KernelIR, seed: u64) -> Tensor {
        run_with(k, &Bindings::new(), seed)
    }
}
