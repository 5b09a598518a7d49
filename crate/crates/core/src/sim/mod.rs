//! Deterministic discrete-event simulation of the memory under churn.

mod config;
mod engine;
mod population;

pub use config::{
    ConfigError, DelayModel, ExperimentConfig, MembershipConfig, OpPattern, ProtocolConfig, Resolved, Workload,
};
pub use engine::{run, Simulation};
pub use population::{ChurnOutcome, Population};
