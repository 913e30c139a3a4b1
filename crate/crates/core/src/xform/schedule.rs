use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    cache_writes, fuse_postop, strip_mine_symbolic, tile_symbolic, unroll_full, XformError, XformStep,
};
use crate::loopir::{Bindings, KernelIR};

pub const SCHEDULE_FORMAT_VERSION: u32 = 1;

/// Per-kernel step lists, as written to and read from JSON.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub format_version: u32,
    pub kernels: BTreeMap<String, Vec<XformStep>>,
}

impl Schedule {
    pub fn from_json(text: &str) -> Result<Self, XformError> {
        let s: Schedule = serde_json::from_str(text)
            .map_err(|e| XformError::NotApplicable(format!("schedule: {e}")))?;
        if s.format_version != SCHEDULE_FORMAT_VERSION {
            return Err(XformError::NotApplicable(format!(
                "schedule format_version {} (expected {SCHEDULE_FORMAT_VERSION})",
                s.format_version
            )));
        }
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

/// Applies one step. `posts` supplies kernels named by `fuse_postop`;
/// `bindings` lists the bindings a parameterized kernel must support.
pub fn apply_step(
    k: &KernelIR,
    step: &XformStep,
    posts: &BTreeMap<String, KernelIR>,
    bindings: &[Bindings],
) -> Result<KernelIR, XformError> {
    match step {
        XformStep::UnrollFull { var } => unroll_full(k, var),
        XformStep::StripMine { var, factor } => strip_mine_symbolic(k, var, *factor, bindings),
        XformStep::Tile { loops, factors } => tile_symbolic(k, loops, factors, bindings),
        XformStep::CacheWrites { buffer } => cache_writes(k, buffer),
        XformStep::FusePostOp { post } => {
            let p = posts
                .get(post)
                .ok_or_else(|| XformError::NotApplicable(format!("no kernel for post-op '{post}'")))?;
            fuse_postop(k, p)
        }
        XformStep::Parameterize { .. } => Err(XformError::NotApplicable(
            "parameterize works on a group, not a single kernel".into(),
        )),
    }
}

pub fn apply_schedule(
    k: &KernelIR,
    steps: &[XformStep],
    posts: &BTreeMap<String, KernelIR>,
    bindings: &[Bindings],
) -> Result<KernelIR, XformError> {
    steps.iter().try_fold(k.clone(), |k, s| apply_step(&k, s, posts, bindings))
}
