//! Sparse-reward particle environments with translation dynamics.
//!
//! Every scenario moves agents by `position + action`, clamped to the arena
//! box, and pays reward only on the final step. Observations are
//! fixed-layout vectors:
//!
//! ```text
//! [ own position (d) | other agents, relative (d each) | entities, relative (d each) | t / T ]
//! ```
//!
//! where `d` is the position dimension (2 for the particle scenarios, 1 for
//! the bimodal toy). Relative entries farther than `obs_radius` are zeroed.

mod scenario;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

pub use scenario::Scenario;

/// Environment parameters. See [`EnvSpec::new`] for the scenario defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub scenario: Scenario,
    pub n_agents: usize,
    pub horizon: usize,
    pub arena_half_width: f64,
    pub action_bound: f64,
    /// `f64::INFINITY` disables masking.
    pub obs_radius: f64,
    pub reward_floor: f64,
    /// When set, randomized entity and start positions are drawn once from
    /// this seed and reused for every episode instead of per episode.
    pub layout_seed: Option<u64>,
}

/// Value type for one point of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    /// `n_agents × d`, row-major.
    pub agents: Vec<f64>,
    /// `n_entities × d`: destinations, food, or landmarks followed by the prey.
    pub entities: Vec<f64>,
    pub t: usize,
}

impl EnvState {
    pub fn agent(&self, i: usize, d: usize) -> &[f64] {
        &self.agents[i * d..(i + 1) * d]
    }
}

/// Outcome of a single transition.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub state: EnvState,
    pub reward: f64,
    pub terminal: bool,
}

/// Radius of predator-prey landmarks as a fraction of the arena half width.
const LANDMARK_RADIUS_FRACTION: f64 = 0.15;

/// Bimodal toy: bump centres at `±BUMP_OFFSET·H` on the diagonal, width `BUMP_WIDTH·H`.
const BUMP_OFFSET: f64 = 0.5;
const BUMP_WIDTH: f64 = 0.2;

impl EnvSpec {
    /// Scenario defaults: horizon 12 for navigation, 25 for food collection
    /// and predator-prey, 4 for the toy; action bound `2.5·H/T`, except the
    /// toy's `H/T`, which never reaches the arena walls.
    pub fn new(scenario: Scenario, n_agents: usize) -> Self {
        let (arena_half_width, horizon) = match scenario {
            Scenario::RobotNavigation => (2.0, 12),
            Scenario::FoodCollection => (2.0, 25),
            Scenario::PredatorPrey => (2.0, 25),
            Scenario::BimodalToy => (1.0, 4),
        };
        EnvSpec {
            scenario,
            n_agents: if scenario == Scenario::BimodalToy {
                2
            } else {
                n_agents
            },
            horizon,
            arena_half_width,
            action_bound: if scenario == Scenario::BimodalToy {
                arena_half_width / horizon as f64
            } else {
                Self::default_action_bound(arena_half_width, horizon)
            },
            obs_radius: f64::INFINITY,
            reward_floor: 1e-3,
            layout_seed: None,
        }
    }

    pub fn default_action_bound(arena_half_width: f64, horizon: usize) -> f64 {
        2.5 * arena_half_width / horizon as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_agents == 0 {
            return bad("env.n_agents must be at least 1".into());
        }
        if self.scenario == Scenario::BimodalToy && self.n_agents != 2 {
            return bad("env.n_agents must be 2 for the bimodal_toy scenario".into());
        }
        if self.horizon == 0 {
            return bad("env.horizon must be positive".into());
        }
        if !(self.arena_half_width > 0.0 && self.arena_half_width.is_finite()) {
            return bad("env.arena_half_width must be a positive finite number".into());
        }
        if !(self.action_bound > 0.0 && self.action_bound.is_finite()) {
            return bad("env.action_bound must be a positive finite number".into());
        }
        if !(self.obs_radius > 0.0) {
            return bad("env.obs_radius must be positive (inf disables masking)".into());
        }
        if !(self.reward_floor > 0.0 && self.reward_floor.is_finite()) {
            return bad("env.reward_floor must be a positive finite number".into());
        }
        Ok(())
    }

    /// Agent start positions shared by every episode, if there are any.
    pub fn fixed_start(&self) -> Option<Vec<f64>> {
        let fixed = match self.scenario {
            Scenario::RobotNavigation | Scenario::BimodalToy => true,
            Scenario::FoodCollection | Scenario::PredatorPrey => self.layout_seed.is_some(),
        };
        fixed.then(|| self.reset(0).agents)
    }

    /// Position (and action) dimension per agent.
    pub fn pos_dim(&self) -> usize {
        self.scenario.pos_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.pos_dim()
    }

    pub fn n_entities(&self) -> usize {
        match self.scenario {
            Scenario::RobotNavigation | Scenario::FoodCollection => self.n_agents,
            Scenario::PredatorPrey => 3,
            Scenario::BimodalToy => 0,
        }
    }

    pub fn obs_dim(&self) -> usize {
        let d = self.pos_dim();
        d + (self.n_agents - 1) * d + self.n_entities() * d + 1
    }

    /// Index of the normalized-time entry in an observation.
    pub fn time_index(&self) -> usize {
        self.obs_dim() - 1
    }

    /// Euclidean diameter of the clamped arena.
    pub fn arena_diameter(&self) -> f64 {
        2.0 * self.arena_half_width * (self.pos_dim() as f64).sqrt()
    }

    fn clamp(&self, x: f64) -> f64 {
        x.clamp(-self.arena_half_width, self.arena_half_width)
    }

    fn random_point<R: Rng>(&self, rng: &mut R, margin: f64) -> Vec<f64> {
        let h = self.arena_half_width * margin;
        (0..self.pos_dim()).map(|_| rng.gen_range(-h..h)).collect()
    }

    /// Initial state. Fixed-layout scenarios ignore the seed; randomized ones
    /// draw from `layout_seed` if set, else from `seed`.
    pub fn reset(&self, seed: u64) -> EnvState {
        let h = self.arena_half_width;
        let n = self.n_agents;
        let mut rng = seeded(self.layout_seed.unwrap_or(seed));
        let (agents, entities) = match self.scenario {
            Scenario::RobotNavigation => {
                let agents = vec![0.0; n * 2];
                let mut dest = Vec::with_capacity(n * 2);
                for j in 0..n {
                    let angle = std::f64::consts::FRAC_PI_4
                        + 2.0 * std::f64::consts::PI * j as f64 / n as f64;
                    dest.push(0.6 * h * angle.cos());
                    dest.push(0.6 * h * angle.sin());
                }
                (agents, dest)
            }
            Scenario::FoodCollection => {
                let agents: Vec<f64> = (0..n)
                    .flat_map(|_| self.random_point(&mut rng, 1.0))
                    .collect();
                let food: Vec<f64> = (0..n)
                    .flat_map(|_| self.random_point(&mut rng, 0.8))
                    .collect();
                (agents, food)
            }
            Scenario::PredatorPrey => {
                let agents: Vec<f64> = (0..n)
                    .flat_map(|_| self.random_point(&mut rng, 1.0))
                    .collect();
                let mut entities: Vec<f64> = (0..2)
                    .flat_map(|_| self.random_point(&mut rng, 0.7))
                    .collect();
                entities.extend(self.random_point(&mut rng, 0.8));
                let mut state = EnvState {
                    agents,
                    entities,
                    t: 0,
                };
                for i in 0..n {
                    self.push_out_of_landmarks(&mut state, i);
                }
                return state;
            }
            Scenario::BimodalToy => (vec![0.0; n], Vec::new()),
        };
        EnvState {
            agents,
            entities,
            t: 0,
        }
    }

    fn push_out_of_landmarks(&self, state: &mut EnvState, i: usize) {
        let r = LANDMARK_RADIUS_FRACTION * self.arena_half_width;
        for l in 0..2 {
            let (lx, ly) = (state.entities[2 * l], state.entities[2 * l + 1]);
            let (ax, ay) = (state.agents[2 * i], state.agents[2 * i + 1]);
            let (dx, dy) = (ax - lx, ay - ly);
            let dist = (dx * dx + dy * dy).sqrt();
            if dist < r {
                let (ux, uy) = if dist > 0.0 {
                    (dx / dist, dy / dist)
                } else {
                    (1.0, 0.0)
                };
                state.agents[2 * i] = self.clamp(lx + ux * r);
                state.agents[2 * i + 1] = self.clamp(ly + uy * r);
            }
        }
    }

    /// Translate every agent by its action component, clamp, and advance time.
    pub fn step(&self, state: &EnvState, action: &[f64]) -> Result<StepResult> {
        if state.t >= self.horizon {
            return Err(Error::Usage(format!(
                "step called on terminal state (t = {})",
                state.t
            )));
        }
        let d = self.pos_dim();
        if action.len() != self.n_agents * d {
            return Err(Error::dim(
                "EnvSpec::step action",
                self.n_agents * d,
                action.len(),
            ));
        }
        let tol = 1e-12 * self.action_bound.max(1.0);
        if let Some(k) = action
            .iter()
            .position(|a| !(a.abs() <= self.action_bound + tol))
        {
            return Err(Error::Usage(format!(
                "action component {k} = {} outside ±{}",
                action[k], self.action_bound
            )));
        }
        let mut next = state.clone();
        for (p, a) in next.agents.iter_mut().zip(action) {
            *p = self.clamp(*p + a);
        }
        if self.scenario == Scenario::PredatorPrey {
            for i in 0..self.n_agents {
                self.push_out_of_landmarks(&mut next, i);
            }
        }
        next.t += 1;
        let terminal = next.t == self.horizon;
        let reward = if terminal {
            self.terminal_reward(&next)
        } else {
            0.0
        };
        Ok(StepResult {
            state: next,
            reward,
            terminal,
        })
    }

    /// Strictly positive reward of a final state.
    ///
    /// Navigation and food: `floor + Σ_j exp(−min_i ‖e_j − x_i‖)`.
    /// Predator-prey: `floor + Σ_i exp(−‖prey − x_i‖)`.
    /// Toy: `floor + Σ_± exp(−‖x ∓ c‖² / 2σ²)` over the joint position.
    pub fn terminal_reward(&self, state: &EnvState) -> f64 {
        let d = self.pos_dim();
        let n = self.n_agents;
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let bonus: f64 = match self.scenario {
            Scenario::RobotNavigation | Scenario::FoodCollection => (0..self.n_entities())
                .map(|j| {
                    let e = &state.entities[j * d..(j + 1) * d];
                    let nearest = (0..n)
                        .map(|i| dist(e, state.agent(i, d)))
                        .fold(f64::INFINITY, f64::min);
                    (-nearest).exp()
                })
                .sum(),
            Scenario::PredatorPrey => {
                let prey = &state.entities[4..6];
                (0..n).map(|i| (-dist(prey, state.agent(i, d))).exp()).sum()
            }
            Scenario::BimodalToy => toy_bumps(&state.agents, self.arena_half_width),
        };
        self.reward_floor + bonus
    }

    /// Reward of the toy scenario at an arbitrary joint position, used as
    /// the proportionality target.
    pub fn toy_reward_at(&self, joint: &[f64]) -> f64 {
        self.reward_floor + toy_bumps(joint, self.arena_half_width)
    }

    pub fn observe(&self, state: &EnvState, agent: usize) -> Result<Vec<f64>> {
        if agent >= self.n_agents {
            return Err(Error::Usage(format!(
                "agent index {agent} out of range for {} agents",
                self.n_agents
            )));
        }
        let d = self.pos_dim();
        let mut obs = Vec::with_capacity(self.obs_dim());
        let own = state.agent(agent, d);
        obs.extend_from_slice(own);
        let mut push_relative = |other: &[f64]| {
            let rel: Vec<f64> = other.iter().zip(own).map(|(o, s)| o - s).collect();
            let norm = rel.iter().map(|r| r * r).sum::<f64>().sqrt();
            if norm <= self.obs_radius {
                obs.extend(rel);
            } else {
                obs.extend(std::iter::repeat_n(0.0, d));
            }
        };
        for j in (0..self.n_agents).filter(|&j| j != agent) {
            push_relative(state.agent(j, d));
        }
        for e in state.entities.chunks(d) {
            push_relative(e);
        }
        obs.push(state.t as f64 / self.horizon as f64);
        Ok(obs)
    }

    pub fn observe_all(&self, state: &EnvState) -> Vec<Vec<f64>> {
        (0..self.n_agents)
            .map(|i| self.observe(state, i).expect("index in range"))
            .collect()
    }
}

fn toy_bumps(joint: &[f64], h: f64) -> f64 {
    let c = BUMP_OFFSET * h;
    let s2 = 2.0 * (BUMP_WIDTH * h).powi(2);
    let sq = |sign: f64| joint.iter().map(|x| (x - sign * c).powi(2)).sum::<f64>();
    (-sq(1.0) / s2).exp() + (-sq(-1.0) / s2).exp()
}
