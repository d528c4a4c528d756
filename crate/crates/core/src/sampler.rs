//! Flow-distribution action sampling and episode rollout.
//!
//! At every step each agent draws `K̂` candidate actions uniformly from its
//! action box, scores them with its own flow network, and picks one from the
//! softmax of the log-flows (or the argmax in greedy mode). Candidates are
//! drawn fresh at every step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, Transition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    Sample,
    Greedy,
}

/// How actions are chosen during a rollout.
#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    Flow {
        model: &'a FlowModel,
        mode: SelectMode,
        k_hat: usize,
        temperature: f64,
    },
    /// Uniform random actions; the baseline policy.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub state: EnvState,
    pub observations: Vec<Vec<f64>>,
    /// Joint action taken from this state; `None` on the terminal record.
    pub action: Option<Vec<f64>>,
    /// Reward received on arriving in this state.
    pub reward: f64,
    pub terminal: bool,
}

/// `s_0 … s_T` with the actions between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
}

impl Trajectory {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn terminal_reward(&self) -> f64 {
        self.records.last().map(|r| r.reward).unwrap_or(0.0)
    }

    pub fn n_agents(&self) -> usize {
        self.records
            .first()
            .map(|r| r.observations.len())
            .unwrap_or(0)
    }

    /// Per-agent `(o_t, a_t, o_{t+1})` samples for inverse-model training.
    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        self.records.windows(2).flat_map(|w| {
            let (cur, next) = (&w[0], &w[1]);
            let action = cur
                .action
                .as_ref()
                .expect("non-terminal record has an action");
            let ad = action.len() / cur.observations.len();
            (0..cur.observations.len()).map(move |i| Transition {
                agent: i,
                obs: cur.observations[i].clone(),
                action: action[i * ad..(i + 1) * ad].to_vec(),
                next_obs: next.observations[i].clone(),
            })
        })
    }
}

/// `k` actions of dimension `d`, i.i.d. uniform on `[−bound, bound]`, row-major.
pub fn uniform_actions<R: Rng + ?Sized>(rng: &mut R, k: usize, d: usize, bound: f64) -> Vec<f64> {
    (0..k * d)
        .map(|_| {
            if bound > 0.0 {
                rng.gen_range(-bound..=bound)
            } else {
                0.0
            }
        })
        .collect()
}

/// Independent candidate sets, one `K̂ × d` block per agent.
pub fn sample_candidates<R: Rng + ?Sized>(
    spec: &EnvSpec,
    k_hat: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if k_hat < 2 {
        return Err(Error::Usage(format!(
            "k_hat must be at least 2, got {k_hat}"
        )));
    }
    Ok((0..spec.n_agents)
        .map(|_| uniform_actions(rng, k_hat, spec.action_dim(), spec.action_bound))
        .collect())
}

/// `softmax(x / temperature)`, shifted by the maximum for stability.
pub fn softmax(log_flows: &[f64], temperature: f64) -> Vec<f64> {
    let m = log_flows.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_flows
        .iter()
        .map(|&x| ((x - m) / temperature).exp())
        .collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn select_index<R: Rng + ?Sized>(
    log_flows: &[f64],
    mode: SelectMode,
    temperature: f64,
    rng: &mut R,
) -> usize {
    match mode {
        SelectMode::Greedy => argmax(log_flows),
        SelectMode::Sample => {
            let probs = softmax(log_flows, temperature);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.len() - 1
        }
    }
}

/// Pick one of `candidates` (`K̂ × action_dim`) for `agent` at observation `obs`.
pub fn select_action<R: Rng + ?Sized>(
    model: &FlowModel,
    agent: usize,
    obs: &[f64],
    candidates: &[f64],
    mode: SelectMode,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let ad = model.config().action_dim;
    if candidates.is_empty() {
        return Err(Error::Usage("no candidate actions".into()));
    }
    let log_flows = model.log_flows(agent, obs, candidates)?;
    let k = select_index(&log_flows, mode, temperature, rng);
    Ok(candidates[k * ad..(k + 1) * ad].to_vec())
}

/// Run one episode to the horizon.
pub fn rollout<R: Rng + ?Sized>(
    spec: &EnvSpec,
    policy: Policy<'_>,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut state = spec.reset(rng.gen());
    let mut records = Vec::with_capacity(spec.horizon + 1);
    let mut reward = 0.0;
    loop {
        let observations = spec.observe_all(&state);
        if state.t == spec.horizon {
            records.push(TrajectoryRecord {
                state,
                observations,
                action: None,
                reward,
                terminal: true,
            });
            break;
        }
        let action: Vec<f64> = match policy {
            Policy::Random => {
                uniform_actions(rng, spec.n_agents, spec.action_dim(), spec.action_bound)
            }
            Policy::Flow {
                model,
                mode,
                k_hat,
                temperature,
            } => {
                let candidates = sample_candidates(spec, k_hat, rng)?;
                let mut joint = Vec::with_capacity(spec.n_agents * spec.action_dim());
                for (i, cands) in candidates.iter().enumerate() {
                    joint.extend(select_action(
                        model,
                        i,
                        &observations[i],
                        cands,
                        mode,
                        temperature,
                        rng,
                    )?);
                }
                joint
            }
        };
        let step = spec.step(&state, &action)?;
        records.push(TrajectoryRecord {
            state,
            observations,
            action: Some(action),
            reward,
            terminal: false,
        });
        state = step.state;
        reward = step.reward;
    }
    Ok(Trajectory { records })
}
