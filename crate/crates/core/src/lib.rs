//! Locally differentially private estimation of a Gaussian mean.
//!
//! Four protocols (one or two rounds, known or bounded unknown variance) built
//! from randomized response and the Laplace mechanism, with a replayable
//! transcript format, exact privacy audits and a Monte Carlo harness.

pub mod aggregation;
pub mod analyst;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod protocols;
pub mod randomizers;

pub use error::{Error, Result};
pub use protocols::{
    plan_partition, replay, run_protocol, simulate, EstimateOutcome, PartitionPlan, Population, ProtocolConfig,
    ProtocolId, SimulationTruth, Transcript, VarianceMode,
};
