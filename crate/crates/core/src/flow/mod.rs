//! Per-agent log-edge-flow networks and the inverse transition model.
//!
//! The joint edge flow of a state and joint action is the product of the
//! agents' individual edge flows; in log space that is a plain sum, which
//! is what [`FlowModel::joint_log_flow`] returns.

mod checkpoint;
mod inverse;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Init, Matrix, Mlp, ParamStore};
use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, NetworkRecord, RngRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use inverse::{InverseMode, InverseModel, ObsLayout, Transition};

/// Shape of the flow networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowNetConfig {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// One network for all agents instead of one per agent.
    pub shared: bool,
}

impl FlowNetConfig {
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.obs_dim + self.action_dim];
        dims.extend(&self.hidden);
        dims.push(1);
        dims
    }

    fn n_nets(&self) -> usize {
        if self.shared {
            1
        } else {
            self.n_agents
        }
    }
}

/// `F_i^log(o, a)` for every agent, all in one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    config: FlowNetConfig,
    nets: Vec<Mlp>,
    store: ParamStore,
}

impl FlowModel {
    pub fn new<R: Rng + ?Sized>(config: FlowNetConfig, init: Init, rng: &mut R) -> Result<Self> {
        if config.n_agents == 0 || config.obs_dim == 0 || config.action_dim == 0 {
            return Err(Error::Config(format!(
                "invalid flow model shape {config:?}"
            )));
        }
        let dims = config.layer_dims();
        let acts = vec![config.activation; config.hidden.len()];
        let mut store = ParamStore::new();
        let nets = (0..config.n_nets())
            .map(|i| Mlp::new(&mut store, &format!("flow_{i}"), &dims, &acts, init, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(FlowModel {
            config,
            nets,
            store,
        })
    }

    /// Rebuild from explicit parameter values (checkpoint load).
    pub(crate) fn from_values(config: FlowNetConfig, values: &[f64]) -> Result<Self> {
        let mut m = FlowModel::new(config, Init::Zero, &mut crate::rng::seeded(0))?;
        m.store.load(values)?;
        Ok(m)
    }

    pub fn config(&self) -> &FlowNetConfig {
        &self.config
    }

    pub fn n_agents(&self) -> usize {
        self.config.n_agents
    }

    pub fn nets(&self) -> &[Mlp] {
        &self.nets
    }

    pub fn net(&self, agent: usize) -> &Mlp {
        if self.config.shared {
            &self.nets[0]
        } else {
            &self.nets[agent]
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_agent(&self, agent: usize) -> Result<()> {
        if agent >= self.config.n_agents {
            return Err(Error::Usage(format!(
                "agent index {agent} out of range for {} agents",
                self.config.n_agents
            )));
        }
        Ok(())
    }

    /// Network input rows `[o | a_k]` for each candidate `a_k` (rows of `actions`).
    pub fn input_rows(&self, obs: &[f64], actions: &[f64]) -> Result<Matrix> {
        let (od, ad) = (self.config.obs_dim, self.config.action_dim);
        if obs.len() != od {
            return Err(Error::dim("flow input observation", od, obs.len()));
        }
        if !actions.len().is_multiple_of(ad) {
            return Err(Error::dim("flow input actions", ad, actions.len() % ad));
        }
        let k = actions.len() / ad;
        let mut data = Vec::with_capacity(k * (od + ad));
        for a in actions.chunks(ad) {
            data.extend_from_slice(obs);
            data.extend_from_slice(a);
        }
        Matrix::from_vec(k, od + ad, data)
    }

    /// Log-flows of one agent for a batch of candidate actions at one observation.
    pub fn log_flows(&self, agent: usize, obs: &[f64], actions: &[f64]) -> Result<Vec<f64>> {
        self.check_agent(agent)?;
        let x = self.input_rows(obs, actions)?;
        let out = self.net(agent).eval(self.store.values(), &x)?.into_vec();
        if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
            return Err(Error::ModelDiverged(format!(
                "agent {agent} log-flow evaluated to {bad}"
            )));
        }
        Ok(out)
    }

    pub fn log_edge_flow(&self, agent: usize, obs: &[f64], action: &[f64]) -> Result<f64> {
        if action.len() != self.config.action_dim {
            return Err(Error::dim(
                "log_edge_flow action",
                self.config.action_dim,
                action.len(),
            ));
        }
        Ok(self.log_flows(agent, obs, action)?[0])
    }

    /// `Σ_i F_i^log(o^i, a^i)`, the log of the joint edge flow. `actions`
    /// holds the joint action, agent-major.
    pub fn joint_log_flow(&self, observations: &[Vec<f64>], actions: &[f64]) -> Result<f64> {
        let n = self.config.n_agents;
        let ad = self.config.action_dim;
        if observations.len() != n {
            return Err(Error::dim(
                "joint_log_flow observations",
                n,
                observations.len(),
            ));
        }
        if actions.len() != n * ad {
            return Err(Error::dim("joint_log_flow actions", n * ad, actions.len()));
        }
        let mut total = 0.0;
        for (i, o) in observations.iter().enumerate() {
            total += self.log_edge_flow(i, o, &actions[i * ad..(i + 1) * ad])?;
        }
        Ok(total)
    }
}
