//! Multi-agent continuous flow networks.
//!
//! Per-agent log-edge-flow networks are trained with a centralized
//! flow-matching loss whose inflow and outflow integrals are estimated by
//! uniform Monte-Carlo sampling of candidate actions. Execution is
//! decentralized: each agent samples from a softmax over its own flows.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod envs;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use config::{RunConfig, RunSettings};
pub use envs::{EnvSpec, EnvState, Scenario};
pub use error::{Error, Result};
pub use flow::{Checkpoint, FlowModel, FlowNetConfig, InverseMode, InverseModel};
pub use sampler::{Policy, SelectMode, Trajectory};
pub use trainer::{train_loop, RunSummary, Trainer};
