//! Versioned JSON checkpoint.
//!
//! Top-level fields, in order:
//!
//! | field               | type                         | meaning                                        |
//! |---------------------|------------------------------|------------------------------------------------|
//! | `format`            | string                       | always `"macfn-checkpoint"`                    |
//! | `version`           | integer                      | [`CHECKPOINT_VERSION`]                         |
//! | `config`            | object                       | the resolved run config (same keys as the TOML file) |
//! | `flow_networks`     | array of network records     | one per agent, or one when parameters are shared |
//! | `flow_optimizer`    | Adam record                  | over the concatenated flow parameters          |
//! | `inverse_network`   | network record or `null`     | `null` in analytic inverse mode                |
//! | `inverse_optimizer` | Adam record or `null`        |                                                |
//! | `rng`               | `{root_seed, episodes, updates}` | stream coordinates; all randomness is derived from these |
//! | `env_steps`         | integer                      | environment steps consumed so far              |
//!
//! A network record is `{name, layer_dims, activations, params}`: layer
//! widths from input to output, one activation tag (`"tanh"`/`"relu"`) per
//! hidden layer, and the flat parameters. Layer `l` stores its weight
//! matrix row-major as `dims[l+1] × dims[l]`, followed by `dims[l+1]`
//! biases; layers follow each other. An Adam record is
//! `{config: {lr, beta1, beta2, eps}, m, v, step_count}`.
//!
//! Floats are written in shortest round-trip form, so a save/load cycle is
//! exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FlowModel, FlowNetConfig, InverseModel};
use crate::autodiff::{Activation, AdamState, Mlp, ParamStore};
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "macfn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub name: String,
    pub layer_dims: Vec<usize>,
    pub activations: Vec<String>,
    pub params: Vec<f64>,
}

impl NetworkRecord {
    fn capture(name: &str, net: &Mlp, store: &ParamStore) -> Self {
        NetworkRecord {
            name: name.to_string(),
            layer_dims: net.dims().to_vec(),
            activations: net
                .activations()
                .iter()
                .map(|a| a.tag().to_string())
                .collect(),
            params: store.slice(net.slot()).to_vec(),
        }
    }

    fn check_matches(&self, net: &Mlp) -> Result<()> {
        let acts = self
            .activations
            .iter()
            .map(|t| Activation::from_tag(t))
            .collect::<Result<Vec<_>>>()?;
        if self.layer_dims != net.dims()
            || acts != net.activations()
            || self.params.len() != net.slot().len
        {
            return Err(Error::Config(format!(
                "checkpoint network `{}` ({:?}) does not match the configured architecture ({:?})",
                self.name,
                self.layer_dims,
                net.dims()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngRecord {
    pub root_seed: u64,
    pub episodes: u64,
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub flow_networks: Vec<NetworkRecord>,
    pub flow_optimizer: AdamState,
    pub inverse_network: Option<NetworkRecord>,
    pub inverse_optimizer: Option<AdamState>,
    pub rng: RngRecord,
    pub env_steps: u64,
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        flow: &FlowModel,
        flow_optimizer: &AdamState,
        inverse: &InverseModel,
        rng: RngRecord,
        env_steps: u64,
    ) -> Self {
        let flow_networks = flow
            .nets()
            .iter()
            .enumerate()
            .map(|(i, net)| NetworkRecord::capture(&format!("flow_{i}"), net, flow.params()))
            .collect();
        let (inverse_network, inverse_optimizer) = match inverse.network() {
            Some((net, store, adam)) => (
                Some(NetworkRecord::capture("inverse", net, store)),
                Some(adam.clone()),
            ),
            None => (None, None),
        };
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            flow_networks,
            flow_optimizer: flow_optimizer.clone(),
            inverse_network,
            inverse_optimizer,
            rng,
            env_steps,
        }
    }

    /// Rebuild the flow model from the stored parameters. `flow_config`
    /// must describe the same architecture.
    pub fn restore_flow(&self, flow_config: FlowNetConfig) -> Result<FlowModel> {
        let values: Vec<f64> = self
            .flow_networks
            .iter()
            .flat_map(|r| r.params.iter().copied())
            .collect();
        let model = FlowModel::from_values(flow_config, &values).map_err(|e| match e {
            Error::Dimension { .. } => Error::Config(
                "checkpoint flow parameters do not match the configured architecture".into(),
            ),
            other => other,
        })?;
        if model.nets().len() != self.flow_networks.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} flow networks, config expects {}",
                self.flow_networks.len(),
                model.nets().len()
            )));
        }
        for (rec, net) in self.flow_networks.iter().zip(model.nets()) {
            rec.check_matches(net)?;
        }
        if self.flow_optimizer.m.len() != model.params().len() {
            return Err(Error::dim(
                "checkpoint flow optimizer",
                model.params().len(),
                self.flow_optimizer.m.len(),
            ));
        }
        Ok(model)
    }

    /// Load stored inverse parameters into a freshly built model of the
    /// configured mode.
    pub fn restore_inverse(&self, mut inverse: InverseModel) -> Result<InverseModel> {
        match (&self.inverse_network, &self.inverse_optimizer) {
            (Some(rec), Some(adam)) => {
                let (net, _, _) = inverse.network().ok_or_else(|| {
                    Error::Config(
                        "checkpoint holds a learned inverse model, config says analytic".into(),
                    )
                })?;
                rec.check_matches(net)?;
                inverse.restore_learned(&rec.params, adam.clone())?;
                Ok(inverse)
            }
            (None, None) if inverse.network().is_none() => Ok(inverse),
            _ => Err(Error::Config(
                "checkpoint inverse model does not match the configured inverse mode".into(),
            )),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let format = raw
            .get("format")
            .and_then(|v| v.as_str())
            .unwrap_or_default();
        if format != CHECKPOINT_FORMAT {
            return Err(Error::Serialization(format!(
                "not a checkpoint file (format `{format}`)"
            )));
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(serde_json::from_value(raw)?)
    }

    /// Write via a temporary file and rename, so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
