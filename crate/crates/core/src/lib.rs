//! Compile CNN inference graphs into dataflow accelerator kernel plans.
//!
//! The pipeline: [`netdef`] parses and validates a network, [`loopir`]
//! lowers each layer to a loop nest (and interprets it), [`xform`] rewrites
//! loop nests, [`plan`] picks an execution mode and factors, [`costmodel`]
//! estimates resources and throughput, and [`emit`] writes the artifacts.

pub mod costmodel;
pub mod emit;
pub mod loopir;
pub mod netdef;
pub mod plan;
pub mod xform;

use thiserror::Error;

/// Any failure of the compile pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Net(#[from] netdef::NetError),
    #[error(transparent)]
    Ir(#[from] loopir::IrError),
    #[error(transparent)]
    Xform(#[from] xform::XformError),
    #[error(transparent)]
    Plan(#[from] plan::PlanError),
    #[error(transparent)]
    Cost(#[from] costmodel::CostError),
    #[error(transparent)]
    Emit(#[from] emit::EmitError),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl Error {
    /// Short machine-readable class, e.g. `override_infeasible`.
    pub fn kind(&self) -> &'static str {
        use plan::PlanError as P;
        match self {
            Error::Net(_) => "network",
            Error::Ir(_) => "ir",
            Error::Xform(_) => "transform",
            Error::Plan(P::OverrideInfeasible { .. }) => "override_infeasible",
            Error::Plan(P::NoFeasibleFactor { .. }) => "no_feasible_factor",
            Error::Plan(P::ModeMismatch { .. }) => "mode_mismatch",
            Error::Plan(_) => "plan",
            Error::Cost(_) => "cost",
            Error::Emit(_) => "emit",
            Error::Verification(_) => "verification",
        }
    }

    /// The device resource behind a planning failure, when there is one.
    pub fn constraint(&self) -> Option<String> {
        match self {
            Error::Plan(plan::PlanError::OverrideInfeasible { .. }) => Some("bram_bits".to_string()),
            Error::Plan(plan::PlanError::NoFeasibleFactor { resource, .. }) => Some(resource.clone()),
            _ => None,
        }
    }
}

/// Network and device descriptions shipped with the crate.
pub mod bundled {
    use crate::costmodel::DeviceProfile;
    use crate::netdef::{parse_network, NetError, NetworkGraph};

    pub const LENET5: &str = include_str!("../../../models/lenet5.json");
    pub const MOBILENET_V1: &str = include_str!("../../../models/mobilenetv1.json");
    pub const RESNET34: &str = include_str!("../../../models/resnet34.json");

    /// Bundled model text by name (`lenet5`, `mobilenetv1`, `resnet34`).
    pub fn model_text(name: &str) -> Option<&'static str> {
        match name {
            "lenet5" => Some(LENET5),
            "mobilenetv1" => Some(MOBILENET_V1),
            "resnet34" => Some(RESNET34),
            _ => None,
        }
    }

    pub fn model(name: &str) -> Option<Result<NetworkGraph, NetError>> {
        model_text(name).map(parse_network)
    }

    pub fn lenet5() -> NetworkGraph {
        parse_network(LENET5).expect("bundled model parses")
    }

    pub fn mobilenet_v1() -> NetworkGraph {
        parse_network(MOBILENET_V1).expect("bundled model parses")
    }

    pub fn resnet34() -> NetworkGraph {
        parse_network(RESNET34).expect("bundled model parses")
    }

    pub fn s10sx() -> DeviceProfile {
        DeviceProfile::s10sx()
    }
}
