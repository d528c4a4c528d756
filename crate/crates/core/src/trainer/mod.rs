//! Training loop: rollout, replay, inverse-model regression and the
//! flow-matching update.
//!
//! A run writes four artifacts into its output directory:
//!
//! - `config.toml`: the resolved configuration,
//! - `metrics.csv`: one row per evaluation (see [`METRICS_COLUMNS`]),
//! - `checkpoint.json`: the latest good checkpoint,
//! - `summary.json`: a [`RunSummary`] written when the run ends.

mod buffer;
mod loss;

use std::fs::File;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Init};
use crate::config::{RunConfig, RunSettings};
use crate::envs::EnvSpec;
use crate::error::Result;
use crate::flow::{
    Checkpoint, FlowModel, FlowNetConfig, InverseMode, InverseModel, ObsLayout, RngRecord,
    Transition,
};
use crate::metrics::{collect, count_distinct, DiversityReport, ReturnStats};
use crate::rng::{stream, Domain};
use crate::sampler::{rollout, Policy, SelectMode, Trajectory};

pub use buffer::ReplayBuffer;
pub use loss::{
    compute_inflow_term, compute_outflow_term, flow_matching_loss, flow_matching_loss_with,
    inflow_with_candidates, log_product_of_sums, outflow_with_candidates, InflowEstimator,
    InitialInflow, LossCandidates, LossConfig, LossReport, ParentRegion, Reach, StateFlows,
    TerminalOutflowMode,
};

pub const METRICS_COLUMNS: [&str; 7] = [
    "env_steps",
    "episodes",
    "fm_loss",
    "inverse_loss",
    "mean_test_return_greedy",
    "mean_test_return_sample",
    "n_distinct_trajectories",
];

/// Index offset separating sample-mode evaluation episodes from greedy ones
/// within the `Eval` stream domain.
const SAMPLE_EVAL_OFFSET: u64 = 1 << 32;

pub fn flow_net_config(config: &RunConfig, spec: &EnvSpec) -> FlowNetConfig {
    FlowNetConfig {
        n_agents: spec.n_agents,
        obs_dim: spec.obs_dim(),
        action_dim: spec.action_dim(),
        hidden: config.model.hidden.clone(),
        activation: config.model.activation,
        shared: config.model.shared_params,
    }
}

fn adam_config(config: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: config.train.learning_rate,
        ..AdamConfig::default()
    }
}

/// Freshly initialized environment, flow model and inverse model. Flow
/// weights come from stream `(seed, Init, 0)`, inverse weights from
/// `(seed, Init, 1)`.
pub fn build_models(config: &RunConfig) -> Result<(EnvSpec, FlowModel, InverseModel)> {
    config.validate()?;
    let spec = config.env_spec()?;
    let seed = config.run.seed;
    let flow = FlowModel::new(
        flow_net_config(config, &spec),
        Init::Uniform,
        &mut stream(seed, Domain::Init, 0),
    )?;
    let layout = ObsLayout::from_spec(&spec);
    let inverse = match config.model.inverse_mode {
        InverseMode::Analytic => InverseModel::analytic(layout, spec.action_dim(), spec.n_agents),
        InverseMode::Learned => InverseModel::learned(
            layout,
            spec.action_dim(),
            spec.n_agents,
            &config.model.inverse_hidden,
            config.model.activation,
            adam_config(config),
            &mut stream(seed, Domain::Init, 1),
        )?,
    };
    Ok((spec, flow, inverse))
}

/// Environment and models described by a checkpoint.
pub fn models_from_checkpoint(ckpt: &Checkpoint) -> Result<(EnvSpec, FlowModel, InverseModel)> {
    let (spec, _, inverse) = build_models(&ckpt.config)?;
    let flow = ckpt.restore_flow(flow_net_config(&ckpt.config, &spec))?;
    let inverse = ckpt.restore_inverse(inverse)?;
    Ok((spec, flow, inverse))
}

/// Losses of one training iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateReport {
    pub fm_loss: f64,
    pub inverse_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub greedy: ReturnStats,
    pub sample: ReturnStats,
    pub diversity: DiversityReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_steps: u64,
    pub episodes: u64,
    pub fm_loss: f64,
    pub inverse_loss: f64,
    pub mean_test_return_greedy: f64,
    pub mean_test_return_sample: f64,
    pub n_distinct_trajectories: usize,
}

/// Owns every piece of mutable training state.
pub struct Trainer {
    config: RunConfig,
    spec: EnvSpec,
    settings: RunSettings,
    flow: FlowModel,
    flow_adam: AdamState,
    inverse: InverseModel,
    buffer: ReplayBuffer,
    rng: RngRecord,
    env_steps: u64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        let (spec, flow, inverse) = build_models(&config)?;
        let settings = config.settings()?;
        let flow_adam = AdamState::new(flow.params().len(), adam_config(&config));
        let buffer = ReplayBuffer::new(config.train.buffer_capacity);
        let rng = RngRecord {
            root_seed: config.run.seed,
            episodes: 0,
            updates: 0,
        };
        Ok(Trainer {
            config,
            spec,
            settings,
            flow,
            flow_adam,
            inverse,
            buffer,
            rng,
            env_steps: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn flow(&self) -> &FlowModel {
        &self.flow
    }

    pub fn inverse(&self) -> &InverseModel {
        &self.inverse
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn episodes(&self) -> u64 {
        self.rng.episodes
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            epsilon: self.config.train.epsilon,
            k_hat: self.config.train.k_hat,
            terminal_mode: self.config.train.terminal_outflow_mode,
            inflow: self.config.train.inflow_estimator,
            initial_inflow: self.config.train.initial_inflow,
            action_bound: self.spec.action_bound,
            parent_region: self
                .config
                .train
                .mask_infeasible_parents
                .then(|| ParentRegion {
                    half_width: self.spec.arena_half_width,
                    reach: self.spec.fixed_start().map(|start| Reach {
                        start,
                        per_step: self.spec.action_bound,
                    }),
                }),
        }
    }

    pub fn policy(&self, mode: SelectMode) -> Policy<'_> {
        Policy::Flow {
            model: &self.flow,
            mode,
            k_hat: self.config.train.k_hat,
            temperature: self.config.train.temperature,
        }
    }

    /// Flow learning rate at the current step count, linear from
    /// `learning_rate` to `learning_rate · final_lr_fraction`.
    pub fn flow_learning_rate(&self) -> f64 {
        let t = &self.config.train;
        let progress = if t.total_env_steps == 0 {
            0.0
        } else {
            (self.env_steps as f64 / t.total_env_steps as f64).min(1.0)
        };
        t.learning_rate * (1.0 - progress * (1.0 - t.final_lr_fraction))
    }

    /// One iteration: a sample-mode episode into the buffer (a uniform
    /// random one with probability `explore_episode_prob`), then one
    /// inverse-model step and one flow-model step on a sampled batch.
    pub fn step(&mut self) -> Result<UpdateReport> {
        let seed = self.rng.root_seed;
        let mut rr = stream(seed, Domain::Rollout, self.rng.episodes);
        let p = self.config.train.explore_episode_prob;
        let policy = if p > 0.0 && rr.gen::<f64>() < p {
            Policy::Random
        } else {
            self.policy(SelectMode::Sample)
        };
        let traj = rollout(&self.spec, policy, &mut rr)?;
        self.rng.episodes += 1;
        self.env_steps += traj.len() as u64;
        self.buffer.push(traj);

        let update = self.rng.updates;
        let t = &self.config.train;
        let batch = self
            .buffer
            .sample(t.batch_size, &mut stream(seed, Domain::Batch, update));

        let mut inv_rng = stream(seed, Domain::Inverse, update);
        let transitions: Vec<Transition> = self
            .buffer
            .sample(t.inverse_batch, &mut inv_rng)
            .into_iter()
            .map(|tr| random_transition(tr, &mut inv_rng))
            .collect();
        let inverse_loss = self.inverse.train_step(&transitions)?;

        let cands = LossCandidates::sample(
            &batch,
            self.spec.action_dim(),
            self.spec.action_bound,
            t.k_hat,
            &mut stream(seed, Domain::Loss, update),
        );
        let loss_cfg = self.loss_config();
        let (report, grads) =
            flow_matching_loss_with(&self.flow, &self.inverse, &batch, &loss_cfg, &cands)?;
        self.flow_adam.config.lr = self.flow_learning_rate();
        self.flow_adam
            .step(self.flow.params_mut().values_mut(), &grads)?;
        self.rng.updates += 1;
        Ok(UpdateReport {
            fm_loss: report.flow_matching_loss,
            inverse_loss,
        })
    }

    /// Greedy and sample-mode test returns over `eval_episodes` episodes,
    /// plus the distinct-trajectory count of the sample-mode episodes.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let n = self.config.eval.eval_episodes;
        let seed = self.rng.root_seed;
        let greedy = collect(
            &self.spec,
            self.policy(SelectMode::Greedy),
            n,
            seed,
            Domain::Eval,
            0,
        )?;
        let sample = collect(
            &self.spec,
            self.policy(SelectMode::Sample),
            n,
            seed,
            Domain::Eval,
            SAMPLE_EVAL_OFFSET,
        )?;
        let returns = |ts: &[Trajectory]| {
            ReturnStats::from_returns(ts.iter().map(Trajectory::terminal_reward).collect())
        };
        Ok(EvalReport {
            greedy: returns(&greedy)?,
            sample: returns(&sample)?,
            diversity: count_distinct(
                &sample,
                self.settings.diversity_threshold,
                self.settings.validity_floor,
            )?,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.config,
            &self.flow,
            &self.flow_adam,
            &self.inverse,
            self.rng,
            self.env_steps,
        )
    }
}

fn random_transition<R: Rng + ?Sized>(tr: &Trajectory, rng: &mut R) -> Transition {
    let t = rng.gen_range(0..tr.len());
    let agent = rng.gen_range(0..tr.n_agents());
    let (cur, next) = (&tr.records[t], &tr.records[t + 1]);
    let action = cur
        .action
        .as_ref()
        .expect("non-terminal record has an action");
    let ad = action.len() / tr.n_agents();
    Transition {
        agent,
        obs: cur.observations[agent].clone(),
        action: action[agent * ad..(agent + 1) * ad].to_vec(),
        next_obs: next.observations[agent].clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunStatus,
    pub env_steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub n_evaluations: usize,
    pub last_metrics: Option<MetricsRow>,
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Paths of the run artifacts inside `dir`.
pub struct RunPaths {
    pub config: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub summary: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths {
            config: dir.join("config.toml"),
            metrics: dir.join("metrics.csv"),
            checkpoint: dir.join("checkpoint.json"),
            summary: dir.join("summary.json"),
        }
    }
}

struct MetricsWriter {
    csv: csv::Writer<File>,
}

impl MetricsWriter {
    fn create(path: &Path) -> Result<Self> {
        let mut csv = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        csv.write_record(METRICS_COLUMNS)?;
        csv.flush()?;
        Ok(MetricsWriter { csv })
    }

    fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.csv.serialize(row)?;
        self.csv.flush()?;
        Ok(())
    }
}

/// Run training to `train.total_env_steps`, evaluating whenever the step
/// count crosses a multiple of `eval.eval_every`.
///
/// On divergence the checkpoint from the last evaluation stays in place,
/// `summary.json` records the failure, and the error is returned.
pub fn train_loop(config: &RunConfig) -> Result<RunSummary> {
    let dir = config.run.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let paths = RunPaths::new(&dir);
    std::fs::write(&paths.config, config.to_toml())?;
    let mut metrics = MetricsWriter::create(&paths.metrics)?;

    let mut trainer = Trainer::new(config.clone())?;
    trainer.checkpoint().save(&paths.checkpoint)?;

    let total = config.train.total_env_steps;
    let every = config.eval.eval_every;
    let mut n_evals = 0usize;
    let mut last: Option<MetricsRow> = None;
    let (mut fm_sum, mut inv_sum, mut n_updates) = (0.0, 0.0, 0u64);

    let outcome: Result<()> = (|| {
        while trainer.env_steps < total {
            let r = trainer.step()?;
            fm_sum += r.fm_loss;
            inv_sum += r.inverse_loss;
            n_updates += 1;
            debug!(
                "episode {} fm_loss {:.4} inverse_loss {:.3e}",
                trainer.episodes(),
                r.fm_loss,
                r.inverse_loss
            );
            if trainer.env_steps / every > n_evals as u64 {
                n_evals = (trainer.env_steps / every) as usize;
                let eval = trainer.evaluate()?;
                let row = MetricsRow {
                    env_steps: trainer.env_steps,
                    episodes: trainer.episodes(),
                    fm_loss: fm_sum / n_updates as f64,
                    inverse_loss: inv_sum / n_updates as f64,
                    mean_test_return_greedy: eval.greedy.mean,
                    mean_test_return_sample: eval.sample.mean,
                    n_distinct_trajectories: eval.diversity.n_distinct,
                };
                info!(
                    "steps {} fm_loss {:.4} greedy {:.4} sample {:.4} distinct {}",
                    row.env_steps,
                    row.fm_loss,
                    row.mean_test_return_greedy,
                    row.mean_test_return_sample,
                    row.n_distinct_trajectories
                );
                metrics.append(&row)?;
                last = Some(row);
                (fm_sum, inv_sum, n_updates) = (0.0, 0.0, 0);
                trainer.checkpoint().save(&paths.checkpoint)?;
            }
        }
        trainer.checkpoint().save(&paths.checkpoint)?;
        Ok(())
    })();

    let mut summary = RunSummary {
        status: RunStatus::Completed,
        env_steps: trainer.env_steps,
        episodes: trainer.episodes(),
        updates: trainer.rng.updates,
        n_evaluations: n_evals,
        last_metrics: last,
        output_dir: dir,
        error: None,
    };
    match outcome {
        Ok(()) => {
            std::fs::write(&paths.summary, serde_json::to_string_pretty(&summary)?)?;
            Ok(summary)
        }
        Err(e) if e.is_divergence() => {
            warn!("run diverged after {} env steps: {e}", trainer.env_steps);
            summary.status = RunStatus::Diverged;
            summary.error = Some(e.to_string());
            std::fs::write(&paths.summary, serde_json::to_string_pretty(&summary)?)?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}
