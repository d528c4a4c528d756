//! Evaluation metrics: average test return, distinct-trajectory counts and
//! terminal-state histograms.

use serde::{Deserialize, Serialize};

use crate::envs::{EnvSpec, Scenario};
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::sampler::{rollout, Policy, Trajectory};

/// Mean and population standard deviation of terminal rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnStats {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

impl ReturnStats {
    pub fn from_returns(returns: Vec<f64>) -> Result<Self> {
        if returns.is_empty() {
            return Err(Error::Usage("return statistics of zero episodes".into()));
        }
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Ok(ReturnStats {
            mean,
            std: var.sqrt(),
            returns,
        })
    }
}

/// `n` episodes; episode `k` runs on stream `(root_seed, domain, first_index + k)`.
pub fn collect(
    spec: &EnvSpec,
    policy: Policy<'_>,
    n: usize,
    root_seed: u64,
    domain: Domain,
    first_index: u64,
) -> Result<Vec<Trajectory>> {
    (0..n as u64)
        .map(|k| {
            rollout(
                spec,
                policy,
                &mut stream(root_seed, domain, first_index + k),
            )
        })
        .collect()
}

pub fn avg_test_return(
    spec: &EnvSpec,
    policy: Policy<'_>,
    n_episodes: usize,
    root_seed: u64,
) -> Result<ReturnStats> {
    if n_episodes == 0 {
        return Err(Error::Usage("n_episodes must be at least 1".into()));
    }
    let trajs = collect(spec, policy, n_episodes, root_seed, Domain::Eval, 0)?;
    ReturnStats::from_returns(trajs.iter().map(Trajectory::terminal_reward).collect())
}

fn positions(t: &Trajectory) -> impl Iterator<Item = &[f64]> {
    t.records.iter().map(|r| r.state.agents.as_slice())
}

fn step_distance(a: &[f64], b: &[f64], n_agents: usize) -> f64 {
    let d = a.len() / n_agents;
    a.chunks(d)
        .zip(b.chunks(d))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n_agents as f64
}

fn check_comparable(a: &Trajectory, b: &Trajectory) -> Result<()> {
    if a.records.len() != b.records.len() {
        return Err(Error::Usage(format!(
            "trajectory horizons differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.records.first().map(|r| r.state.agents.len())
        != b.records.first().map(|r| r.state.agents.len())
    {
        return Err(Error::Usage(
            "trajectories have different agent layouts".into(),
        ));
    }
    Ok(())
}

/// Mean over timesteps of the mean over agents of the Euclidean distance
/// between positions.
pub fn trajectory_distance(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    check_comparable(a, b)?;
    if a.records.is_empty() {
        return Ok(0.0);
    }
    let n = a.n_agents().max(1);
    let total: f64 = positions(a)
        .zip(positions(b))
        .map(|(x, y)| step_distance(x, y, n))
        .sum();
    Ok(total / a.records.len() as f64)
}

/// `trajectory_distance(a, b) < threshold`, stopping as soon as the partial
/// sum settles the answer.
fn closer_than(a: &Trajectory, b: &Trajectory, threshold: f64) -> bool {
    let n = a.n_agents().max(1);
    let budget = threshold * a.records.len() as f64;
    let mut acc = 0.0;
    for (x, y) in positions(a).zip(positions(b)) {
        acc += step_distance(x, y, n);
        if acc >= budget {
            return false;
        }
    }
    true
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub n_pairs: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub n_collected: usize,
    pub n_valid: usize,
    pub n_distinct: usize,
    pub threshold: f64,
    pub validity_floor: f64,
    /// Pairwise distances among the first [`PAIRWISE_SAMPLE`] valid trajectories.
    pub pairwise: DistanceSummary,
}

pub const PAIRWISE_SAMPLE: usize = 200;

/// Greedy de-duplication in input order: a valid trajectory (terminal
/// reward above `validity_floor`) is distinct when its distance to every
/// previously accepted one is at least `threshold`.
pub fn count_distinct(
    trajectories: &[Trajectory],
    threshold: f64,
    validity_floor: f64,
) -> Result<DiversityReport> {
    if !(threshold > 0.0) {
        return Err(Error::Usage(format!(
            "diversity threshold must be positive, got {threshold}"
        )));
    }
    let valid: Vec<&Trajectory> = trajectories
        .iter()
        .filter(|t| t.terminal_reward() > validity_floor)
        .collect();
    if let Some(first) = valid.first() {
        for t in &valid[1..] {
            check_comparable(first, t)?;
        }
    }
    let mut accepted: Vec<&Trajectory> = Vec::new();
    for &t in &valid {
        if accepted.iter().all(|a| !closer_than(t, a, threshold)) {
            accepted.push(t);
        }
    }

    let sample = &valid[..valid.len().min(PAIRWISE_SAMPLE)];
    let mut pairwise = DistanceSummary::default();
    let (mut min, mut max, mut sum) = (f64::INFINITY, 0.0f64, 0.0);
    for (i, a) in sample.iter().enumerate() {
        for b in &sample[i + 1..] {
            let d = trajectory_distance(a, b)?;
            min = min.min(d);
            max = max.max(d);
            sum += d;
            pairwise.n_pairs += 1;
        }
    }
    if pairwise.n_pairs > 0 {
        pairwise.min = min;
        pairwise.max = max;
        pairwise.mean = sum / pairwise.n_pairs as f64;
    }

    Ok(DiversityReport {
        n_collected: trajectories.len(),
        n_valid: valid.len(),
        n_distinct: accepted.len(),
        threshold,
        validity_floor,
        pairwise,
    })
}

/// Normalized histogram on a regular grid over `[lo, hi]^dims`, cells in
/// row-major order (last dimension fastest).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub dims: usize,
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    pub mass: Vec<f64>,
}

impl Histogram {
    pub fn from_points<'a>(
        points: impl IntoIterator<Item = &'a [f64]>,
        dims: usize,
        bins: usize,
        lo: f64,
        hi: f64,
    ) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Usage(format!(
                "need at least 2 bins per dimension, got {bins}"
            )));
        }
        let cells = bins
            .checked_pow(dims as u32)
            .ok_or_else(|| Error::Usage("histogram grid too large".into()))?;
        let mut counts = vec![0usize; cells];
        let mut total = 0usize;
        let width = (hi - lo) / bins as f64;
        for p in points {
            if p.len() != dims {
                return Err(Error::dim("histogram point", dims, p.len()));
            }
            let mut cell = 0;
            for &x in p {
                let b = (((x - lo) / width).floor().max(0.0) as usize).min(bins - 1);
                cell = cell * bins + b;
            }
            counts[cell] += 1;
            total += 1;
        }
        if total == 0 {
            return Err(Error::Usage("histogram of zero points".into()));
        }
        Ok(Histogram {
            dims,
            bins,
            lo,
            hi,
            mass: counts
                .into_iter()
                .map(|c| c as f64 / total as f64)
                .collect(),
        })
    }

    /// Centre of each cell, in cell order.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        let width = (self.hi - self.lo) / self.bins as f64;
        (0..self.mass.len())
            .map(|mut cell| {
                let mut c = vec![0.0; self.dims];
                for d in (0..self.dims).rev() {
                    c[d] = self.lo + width * ((cell % self.bins) as f64 + 0.5);
                    cell /= self.bins;
                }
                c
            })
            .collect()
    }
}

/// Terminal joint positions of `n_episodes` rollouts, binned over the arena.
pub fn terminal_histogram(
    spec: &EnvSpec,
    policy: Policy<'_>,
    n_episodes: usize,
    bins: usize,
    root_seed: u64,
) -> Result<Histogram> {
    let trajs = collect(spec, policy, n_episodes, root_seed, Domain::Collect, 0)?;
    histogram_of(spec, &trajs, bins)
}

pub fn histogram_of(spec: &EnvSpec, trajectories: &[Trajectory], bins: usize) -> Result<Histogram> {
    let h = spec.arena_half_width;
    let points = trajectories
        .iter()
        .filter_map(|t| t.records.last())
        .map(|r| r.state.agents.as_slice());
    Histogram::from_points(points, spec.n_agents * spec.pos_dim(), bins, -h, h)
}

/// Bin-integrated, normalized toy reward on the same grid as
/// [`histogram_of`], each cell integrated with a `nodes`-per-dimension
/// midpoint rule.
pub fn toy_reward_histogram(spec: &EnvSpec, bins: usize, nodes: usize) -> Result<Histogram> {
    if spec.scenario != Scenario::BimodalToy {
        return Err(Error::Usage(format!(
            "reward histogram needs the bimodal_toy scenario, got {}",
            spec.scenario
        )));
    }
    let dims = spec.n_agents * spec.pos_dim();
    let h = spec.arena_half_width;
    let fine = bins * nodes;
    let width = 2.0 * h / fine as f64;
    let mut mass = vec![0.0; bins.pow(dims as u32)];
    let mut idx = vec![0usize; dims];
    let mut point = vec![0.0; dims];
    loop {
        let mut cell = 0;
        for d in 0..dims {
            point[d] = -h + width * (idx[d] as f64 + 0.5);
            cell = cell * bins + idx[d] / nodes;
        }
        mass[cell] += spec.toy_reward_at(&point);
        let mut d = dims;
        loop {
            if d == 0 {
                let z: f64 = mass.iter().sum();
                mass.iter_mut().for_each(|m| *m /= z);
                return Ok(Histogram {
                    dims,
                    bins,
                    lo: -h,
                    hi: h,
                    mass,
                });
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < fine {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub fn total_variation(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.mass.len() != q.mass.len() {
        return Err(Error::dim(
            "total_variation cells",
            p.mass.len(),
            q.mass.len(),
        ));
    }
    Ok(0.5
        * p.mass
            .iter()
            .zip(&q.mass)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>())
}

/// Mass on the positive (coordinate sum > 0) and negative sides of the
/// toy's anti-diagonal; cells centred on it are split evenly.
pub fn toy_mode_masses(hist: &Histogram) -> (f64, f64) {
    let (mut pos, mut neg) = (0.0, 0.0);
    for (c, m) in hist.centers().iter().zip(&hist.mass) {
        let s: f64 = c.iter().sum();
        if s.abs() < 1e-12 {
            pos += m / 2.0;
            neg += m / 2.0;
        } else if s > 0.0 {
            pos += m;
        } else {
            neg += m;
        }
    }
    (pos, neg)
}
