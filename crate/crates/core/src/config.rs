//! Run configuration.
//!
//! A config file is TOML with five sections. Every key is optional; keys
//! whose default depends on the scenario (`horizon`, `arena_half_width`,
//! `action_bound`, `diversity_threshold`, `validity_floor`, `n_agents`)
//! are resolved when the config is turned into an [`EnvSpec`] or
//! [`RunSettings`]. Unknown keys are rejected with the offending name.
//!
//! ```toml
//! [env]
//! scenario = "food_collection"      # robot_navigation | food_collection | predator_prey | bimodal_toy
//! n_agents = 3
//! horizon = 25
//! arena_half_width = 2.0
//! action_bound = 0.2
//! obs_radius = 1.5                 # optional: masking radius (inf or unset: none)
//! reward_floor = 0.001
//! layout_seed = 7                   # optional: fixed layout for every episode
//!
//! [model]
//! hidden = [64, 64]
//! activation = "tanh"               # tanh | relu
//! shared_params = false
//! inverse_mode = "learned"          # learned | analytic
//! inverse_hidden = [64, 64]
//!
//! [train]
//! total_env_steps = 1000000
//! k_hat = 20
//! epsilon = 1.0
//! temperature = 1.0
//! learning_rate = 0.0003
//! final_lr_fraction = 1.0           # flow learning rate decays linearly to this fraction at total_env_steps
//! batch_size = 8
//! buffer_capacity = 2000
//! inverse_batch = 256
//! terminal_outflow_mode = "boundary" # boundary | literal
//! inflow_estimator = "factorized"   # factorized | joint (joint needs inverse_mode = "analytic")
//! initial_inflow = "estimated"      # estimated | exact
//! mask_infeasible_parents = false   # joint inflow ignores parents outside the arena or out of reach of the start
//! explore_episode_prob = 0.0        # chance that a whole training episode uses uniform actions
//!
//! [eval]
//! eval_every = 10000
//! eval_episodes = 16
//! diversity_threshold = 0.2
//! validity_floor = 0.051
//!
//! [run]
//! seed = 0
//! output_dir = "runs/default"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::envs::{EnvSpec, Scenario};
use crate::error::{Error, Result};
use crate::flow::InverseMode;
use crate::trainer::{InflowEstimator, InitialInflow, TerminalOutflowMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub scenario: Scenario,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_agents: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arena_half_width: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action_bound: Option<f64>,
    /// Unset means unlimited.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obs_radius: Option<f64>,
    pub reward_floor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout_seed: Option<u64>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            scenario: Scenario::FoodCollection,
            n_agents: None,
            horizon: None,
            arena_half_width: None,
            action_bound: None,
            obs_radius: None,
            reward_floor: 1e-3,
            layout_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub shared_params: bool,
    pub inverse_mode: InverseMode,
    pub inverse_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            shared_params: false,
            inverse_mode: InverseMode::Learned,
            inverse_hidden: vec![64, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_env_steps: u64,
    pub k_hat: usize,
    pub epsilon: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Transitions per inverse-model update.
    pub inverse_batch: usize,
    pub terminal_outflow_mode: TerminalOutflowMode,
    pub inflow_estimator: InflowEstimator,
    pub initial_inflow: InitialInflow,
    pub mask_infeasible_parents: bool,
    pub explore_episode_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_env_steps: 1_000_000,
            k_hat: 20,
            epsilon: 1.0,
            temperature: 1.0,
            learning_rate: 3e-4,
            final_lr_fraction: 1.0,
            batch_size: 8,
            buffer_capacity: 2000,
            inverse_batch: 256,
            terminal_outflow_mode: TerminalOutflowMode::Boundary,
            inflow_estimator: InflowEstimator::Factorized,
            initial_inflow: InitialInflow::Estimated,
            mask_infeasible_parents: false,
            explore_episode_prob: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub eval_every: u64,
    pub eval_episodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validity_floor: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eval_every: 10_000,
            eval_episodes: 16,
            diversity_threshold: None,
            validity_floor: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub run: RunSection,
}

/// Evaluation thresholds after scenario defaults are applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSettings {
    pub diversity_threshold: f64,
    pub validity_floor: f64,
}

impl RunConfig {
    pub fn for_scenario(scenario: Scenario) -> Self {
        RunConfig {
            env: EnvConfig {
                scenario,
                ..EnvConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parse a config and apply `section.key=value` overrides on top. Values
    /// use TOML syntax; anything that does not parse as a TOML value is
    /// taken as a string.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
        if cfg.env.obs_radius == Some(f64::INFINITY) {
            cfg.env.obs_radius = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig is always serializable")
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        let e = &self.env;
        let mut spec = EnvSpec::new(e.scenario, 1);
        spec.n_agents = e.n_agents.unwrap_or(match e.scenario {
            Scenario::RobotNavigation | Scenario::BimodalToy => 2,
            Scenario::FoodCollection | Scenario::PredatorPrey => 3,
        });
        if let Some(h) = e.horizon {
            spec.horizon = h;
        }
        if let Some(w) = e.arena_half_width {
            spec.arena_half_width = w;
        }
        spec.action_bound = match e.action_bound {
            Some(b) => b,
            None if spec.horizon > 0 => {
                EnvSpec::default_action_bound(spec.arena_half_width, spec.horizon)
            }
            None => 0.0,
        };
        spec.obs_radius = e.obs_radius.unwrap_or(f64::INFINITY);
        spec.reward_floor = e.reward_floor;
        spec.layout_seed = e.layout_seed;
        spec.validate()?;
        Ok(spec)
    }

    /// Distinct-trajectory threshold defaults to `0.1·H`; the validity floor
    /// to `reward_floor + 0.05`.
    pub fn settings(&self) -> Result<RunSettings> {
        let spec = self.env_spec()?;
        Ok(RunSettings {
            diversity_threshold: self
                .eval
                .diversity_threshold
                .unwrap_or(0.1 * spec.arena_half_width),
            validity_floor: self.eval.validity_floor.unwrap_or(spec.reward_floor + 0.05),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.env_spec()?;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        let t = &self.train;
        if self
            .model
            .hidden
            .iter()
            .chain(&self.model.inverse_hidden)
            .any(|&h| h == 0)
        {
            return bad("model.hidden and model.inverse_hidden entries must be positive");
        }
        if t.k_hat < 2 {
            return bad("train.k_hat must be at least 2");
        }
        if !(t.epsilon >= 0.0 && t.epsilon.is_finite()) {
            return bad("train.epsilon must be a finite non-negative number");
        }
        if !(t.temperature > 0.0 && t.temperature.is_finite()) {
            return bad("train.temperature must be a positive finite number");
        }
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return bad("train.learning_rate must be a finite non-negative number");
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if t.buffer_capacity == 0 {
            return bad("train.buffer_capacity must be positive");
        }
        if t.inverse_batch == 0 {
            return bad("train.inverse_batch must be positive");
        }
        if t.inflow_estimator == InflowEstimator::Joint
            && self.model.inverse_mode != InverseMode::Analytic
        {
            return bad(
                "train.inflow_estimator = \"joint\" needs model.inverse_mode = \"analytic\"",
            );
        }
        if t.mask_infeasible_parents && t.inflow_estimator != InflowEstimator::Joint {
            return bad("train.mask_infeasible_parents needs train.inflow_estimator = \"joint\"");
        }
        if !(0.0..=1.0).contains(&t.final_lr_fraction) {
            return bad("train.final_lr_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&t.explore_episode_prob) {
            return bad("train.explore_episode_prob must lie in [0, 1]");
        }
        if self.eval.eval_every == 0 {
            return bad("eval.eval_every must be positive");
        }
        if self.eval.eval_episodes == 0 {
            return bad("eval.eval_episodes must be positive");
        }
        if matches!(self.eval.diversity_threshold, Some(x) if !(x > 0.0)) {
            return bad("eval.diversity_threshold must be positive");
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov.split_once('=').ok_or_else(|| {
        Error::Config(format!(
            "override `{ov}` is not of the form section.key=value"
        ))
    })?;
    let (section, field) = key.trim().split_once('.').ok_or_else(|| {
        Error::Config(format!(
            "override key `{key}` is not of the form section.key"
        ))
    })?;
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(field.to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("`{section}` is not a section"))),
    }
}
