//! Monte-Carlo flow-integral estimators checked against quadrature on
//! closed-form flows.
//!
//! An [`AnalyticFlow`] is a per-agent factor `f` on the action box
//! `[−b, b]^d`. The edge flow of agent `i` is `f(a_i + w·o_i)` where `o_i` is
//! the agent's state and `w` the state weight, and the joint flow is the
//! product over agents. The uniform estimator
//!
//! ```text
//! μ(A)/K · Σ_k Π_i f(a_i^k + w·o_i)
//! ```
//!
//! is unbiased for the integral over the joint box `A`, and by Hoeffding's
//! inequality deviates by at least `δ·L·μ(A)·diam(A)/√K` with probability at
//! most `2·exp(−δ²/2)`, where `L` is the Lipschitz constant of the joint
//! integrand.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::sampler::uniform_actions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowShape {
    Constant {
        value: f64,
    },
    /// `offset + height·exp(−‖x − center‖² / 2·width²)`
    GaussianBump {
        offset: f64,
        height: f64,
        center: Vec<f64>,
        width: f64,
    },
    /// `Π_j (1 + amplitude·sin(frequency·x_j + phase))`, `amplitude < 1`.
    SeparableProduct {
        amplitude: f64,
        frequency: f64,
        phase: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticFlow {
    pub shape: FlowShape,
    pub action_dim: usize,
    pub action_bound: f64,
    pub state_weight: f64,
}

impl AnalyticFlow {
    pub fn constant(value: f64, action_dim: usize, action_bound: f64) -> Self {
        AnalyticFlow {
            shape: FlowShape::Constant { value },
            action_dim,
            action_bound,
            state_weight: 0.0,
        }
    }

    /// Unit-height bump of width 0.5 centred at 0.2 in every coordinate,
    /// on top of an offset of 0.1.
    pub fn gaussian_bump(action_dim: usize, action_bound: f64) -> Self {
        AnalyticFlow {
            shape: FlowShape::GaussianBump {
                offset: 0.1,
                height: 1.0,
                center: vec![0.2; action_dim],
                width: 0.5,
            },
            action_dim,
            action_bound,
            state_weight: 0.0,
        }
    }

    pub fn separable_product(action_dim: usize, action_bound: f64) -> Self {
        AnalyticFlow {
            shape: FlowShape::SeparableProduct {
                amplitude: 0.5,
                frequency: 2.0,
                phase: 0.3,
            },
            action_dim,
            action_bound,
            state_weight: 0.0,
        }
    }

    pub fn with_state_weight(mut self, w: f64) -> Self {
        self.state_weight = w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Usage(m.to_string()));
        if self.action_dim == 0 {
            return bad("analytic flow needs action_dim ≥ 1");
        }
        if !(self.action_bound >= 0.0 && self.action_bound.is_finite()) {
            return bad("analytic flow action bound must be finite and non-negative");
        }
        match &self.shape {
            FlowShape::Constant { value } if !(*value > 0.0) => {
                bad("constant flow must be positive")
            }
            FlowShape::GaussianBump {
                offset,
                height,
                center,
                width,
            } => {
                if !(*offset > 0.0 && *height >= 0.0 && *width > 0.0) {
                    bad("gaussian bump needs offset > 0, height ≥ 0, width > 0")
                } else if center.len() != self.action_dim {
                    Err(Error::dim(
                        "gaussian bump centre",
                        self.action_dim,
                        center.len(),
                    ))
                } else {
                    Ok(())
                }
            }
            FlowShape::SeparableProduct { amplitude, .. } if !(amplitude.abs() < 1.0) => {
                bad("separable product needs |amplitude| < 1")
            }
            _ => Ok(()),
        }
    }

    /// The per-agent factor `f(x)`.
    pub fn factor(&self, x: &[f64]) -> f64 {
        match &self.shape {
            FlowShape::Constant { value } => *value,
            FlowShape::GaussianBump {
                offset,
                height,
                center,
                width,
            } => {
                let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                offset + height * (-r2 / (2.0 * width * width)).exp()
            }
            FlowShape::SeparableProduct {
                amplitude,
                frequency,
                phase,
            } => x
                .iter()
                .map(|&a| 1.0 + amplitude * (frequency * a + phase).sin())
                .product(),
        }
    }

    /// Edge flow `f(a + w·o)` of one agent.
    pub fn edge_flow(&self, obs: &[f64], action: &[f64]) -> f64 {
        if self.state_weight == 0.0 {
            return self.factor(action);
        }
        let x: Vec<f64> = action
            .iter()
            .zip(obs)
            .map(|(a, o)| a + self.state_weight * o)
            .collect();
        self.factor(&x)
    }

    /// Euclidean Lipschitz constant of `f`.
    pub fn factor_lipschitz(&self) -> f64 {
        match &self.shape {
            FlowShape::Constant { .. } => 0.0,
            FlowShape::GaussianBump { height, width, .. } => {
                height / (width * std::f64::consts::E.sqrt())
            }
            FlowShape::SeparableProduct {
                amplitude,
                frequency,
                ..
            } => {
                let d = self.action_dim as f64;
                d.sqrt()
                    * amplitude.abs()
                    * frequency.abs()
                    * (1.0 + amplitude.abs()).powi(self.action_dim as i32 - 1)
            }
        }
    }

    /// Supremum of `f`.
    pub fn factor_max(&self) -> f64 {
        match &self.shape {
            FlowShape::Constant { value } => *value,
            FlowShape::GaussianBump { offset, height, .. } => offset + height,
            FlowShape::SeparableProduct { amplitude, .. } => {
                (1.0 + amplitude.abs()).powi(self.action_dim as i32)
            }
        }
    }

    /// Lipschitz constant of the joint integrand `Π_i f(a_i + w·o_i)` in the
    /// joint action: `√N · M^{N−1} · L_f`.
    pub fn lipschitz(&self, n_agents: usize) -> f64 {
        let n = n_agents as f64;
        n.sqrt() * self.factor_max().powi(n_agents as i32 - 1) * self.factor_lipschitz()
    }

    /// Volume of the joint action box.
    pub fn measure(&self, n_agents: usize) -> f64 {
        (2.0 * self.action_bound).powi((n_agents * self.action_dim) as i32)
    }

    /// Euclidean diameter of the joint action box.
    pub fn diameter(&self, n_agents: usize) -> f64 {
        2.0 * self.action_bound * ((n_agents * self.action_dim) as f64).sqrt()
    }

    /// Joint integrand at a flat joint action.
    pub fn joint_flow(&self, states: &[Vec<f64>], joint_action: &[f64]) -> f64 {
        joint_action
            .chunks(self.action_dim)
            .zip(states)
            .map(|(a, o)| self.edge_flow(o, a))
            .product()
    }

    /// Closed-form integral over the joint box.
    pub fn exact_integral(&self, states: &[Vec<f64>]) -> f64 {
        let b = self.action_bound;
        states
            .iter()
            .map(|o| {
                let shift: Vec<f64> = o.iter().map(|x| self.state_weight * x).collect();
                match &self.shape {
                    FlowShape::Constant { value } => value * (2.0 * b).powi(self.action_dim as i32),
                    FlowShape::GaussianBump {
                        offset,
                        height,
                        center,
                        width,
                    } => {
                        let s = width * std::f64::consts::SQRT_2;
                        let gauss: f64 = center
                            .iter()
                            .zip(&shift)
                            .map(|(c, w)| {
                                let lo = -b + w - c;
                                let hi = b + w - c;
                                width
                                    * (std::f64::consts::PI / 2.0).sqrt()
                                    * (libm::erf(hi / s) - libm::erf(lo / s))
                            })
                            .product();
                        offset * (2.0 * b).powi(self.action_dim as i32) + height * gauss
                    }
                    FlowShape::SeparableProduct {
                        amplitude,
                        frequency,
                        phase,
                    } => shift
                        .iter()
                        .map(|w| {
                            let anti = |x: f64| {
                                x - amplitude * (frequency * (x + w) + phase).cos() / frequency
                            };
                            anti(b) - anti(-b)
                        })
                        .product(),
                }
            })
            .product()
    }
}

/// `μ/K · Σ_k f(α_k)` with `α_k` uniform on `[−bound, bound]^dim`.
pub fn mc_estimate_fn<R: Rng + ?Sized>(
    dim: usize,
    bound: f64,
    k: usize,
    rng: &mut R,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert!(k > 0, "mc estimate needs at least one sample");
    let measure = (2.0 * bound).powi(dim as i32);
    let mut sum = 0.0;
    for _ in 0..k {
        let a = uniform_actions(rng, 1, dim, bound);
        sum += f(&a);
    }
    measure * (sum / k as f64)
}

/// Uniform estimate of the joint outflow integral for `states.len()` agents.
pub fn mc_estimate<R: Rng + ?Sized>(
    flow: &AnalyticFlow,
    states: &[Vec<f64>],
    k: usize,
    rng: &mut R,
) -> f64 {
    let n = states.len();
    mc_estimate_fn(n * flow.action_dim, flow.action_bound, k, rng, |a| {
        flow.joint_flow(states, a)
    })
}

/// Parent-side estimate: each agent's flow is evaluated at the parent
/// `o − a + η·u` (`u` the unit diagonal), i.e. an exact inverse translation
/// perturbed by `eta`.
pub fn inflow_estimate_with_inverse<R: Rng + ?Sized>(
    flow: &AnalyticFlow,
    states: &[Vec<f64>],
    k: usize,
    eta: f64,
    rng: &mut R,
) -> f64 {
    let d = flow.action_dim;
    let u = eta / (d as f64).sqrt();
    mc_estimate_fn(states.len() * d, flow.action_bound, k, rng, |joint| {
        joint
            .chunks(d)
            .zip(states)
            .map(|(a, o)| {
                let parent: Vec<f64> = o.iter().zip(a).map(|(o, a)| o - a + u).collect();
                flow.edge_flow(&parent, a)
            })
            .product()
    })
}

/// Bound on `|inflow(η) − inflow(0)|`: `μ·N·M^{N−1}·w·L_f·η`.
pub fn inverse_error_bound(flow: &AnalyticFlow, n_agents: usize, eta: f64) -> f64 {
    flow.measure(n_agents)
        * n_agents as f64
        * flow.factor_max().powi(n_agents as i32 - 1)
        * flow.state_weight.abs()
        * flow.factor_lipschitz()
        * eta.abs()
}

/// Composite midpoint rule with `nodes` points per dimension.
pub fn midpoint_rule(
    dim: usize,
    bound: f64,
    nodes: usize,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let h = 2.0 * bound / nodes as f64;
    let grid: Vec<f64> = (0..nodes).map(|j| -bound + h * (j as f64 + 0.5)).collect();
    let mut idx = vec![0usize; dim];
    let mut x: Vec<f64> = vec![grid[0]; dim];
    let mut sum = 0.0;
    loop {
        sum += f(&x);
        let mut d = dim;
        loop {
            if d == 0 {
                return sum * h.powi(dim as i32);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < nodes {
                x[d] = grid[idx[d]];
                break;
            }
            idx[d] = 0;
            x[d] = grid[0];
        }
    }
}

/// Largest grid the refinement will attempt.
pub const MAX_QUADRATURE_POINTS: usize = 1 << 24;

/// Midpoint rule, doubling the nodes per dimension from `start_nodes` until
/// successive results differ by less than `rel_tol` relative.
pub fn converged_quadrature(
    dim: usize,
    bound: f64,
    start_nodes: usize,
    rel_tol: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Result<f64> {
    if start_nodes < 16 {
        return Err(Error::Usage(format!(
            "quadrature needs at least 16 nodes per dimension, got {start_nodes}"
        )));
    }
    let mut nodes = start_nodes;
    let mut prev = midpoint_rule(dim, bound, nodes, &mut f);
    loop {
        nodes *= 2;
        if nodes
            .checked_pow(dim as u32)
            .is_none_or(|p| p > MAX_QUADRATURE_POINTS)
        {
            return Err(Error::Oracle(format!(
                "quadrature did not reach {rel_tol:e} relative change within {MAX_QUADRATURE_POINTS} points"
            )));
        }
        let next = midpoint_rule(dim, bound, nodes, &mut f);
        if (next - prev).abs() <= rel_tol * next.abs() {
            return Ok(next);
        }
        prev = next;
    }
}

pub const QUADRATURE_TOL: f64 = 1e-6;

/// Converged quadrature of the joint outflow integrand.
pub fn quadrature_integral(
    flow: &AnalyticFlow,
    states: &[Vec<f64>],
    start_nodes: usize,
) -> Result<f64> {
    if flow.action_bound == 0.0 {
        return Ok(0.0);
    }
    converged_quadrature(
        states.len() * flow.action_dim,
        flow.action_bound,
        start_nodes,
        QUADRATURE_TOL,
        |a| flow.joint_flow(states, a),
    )
}

/// Converged quadrature of the exact-inverse inflow integrand.
pub fn inflow_quadrature(
    flow: &AnalyticFlow,
    states: &[Vec<f64>],
    start_nodes: usize,
) -> Result<f64> {
    if flow.action_bound == 0.0 {
        return Ok(0.0);
    }
    let d = flow.action_dim;
    converged_quadrature(
        states.len() * d,
        flow.action_bound,
        start_nodes,
        QUADRATURE_TOL,
        |joint| {
            joint
                .chunks(d)
                .zip(states)
                .map(|(a, o)| {
                    let parent: Vec<f64> = o.iter().zip(a).map(|(o, a)| o - a).collect();
                    flow.edge_flow(&parent, a)
                })
                .product()
        },
    )
}

/// Mean, sample standard error and count of repeated estimates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl EstimateSummary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        EstimateSummary {
            mean,
            stderr: (var / n).sqrt(),
            n: xs.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub truth: f64,
    pub estimates: EstimateSummary,
    /// `|mean − truth| / stderr`.
    pub z: f64,
    pub passed: bool,
}

/// `repeats` independent estimates, trial `r` on stream `(seed, Oracle, r)`.
pub fn unbiasedness_check(
    flow: &AnalyticFlow,
    states: &[Vec<f64>],
    k: usize,
    repeats: usize,
    seed: u64,
) -> Result<UnbiasednessReport> {
    flow.validate()?;
    let truth = quadrature_integral(flow, states, 16)?;
    let xs: Vec<f64> = (0..repeats as u64)
        .map(|r| mc_estimate(flow, states, k, &mut stream(seed, Domain::Oracle, r)))
        .collect();
    let estimates = EstimateSummary::of(&xs);
    let dev = (estimates.mean - truth).abs();
    let z = if estimates.stderr > 0.0 {
        dev / estimates.stderr
    } else if dev == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(UnbiasednessReport {
        truth,
        estimates,
        z,
        passed: z <= 3.0,
    })
}

/// Which integrand a concentration trial estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrand {
    Outflow,
    /// Exact-inverse parent side; the radius uses `diam(A) + state_diameter`.
    Inflow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub integrand: Integrand,
    pub n_agents: usize,
    pub k: usize,
    pub delta: f64,
    pub lipschitz: f64,
    pub radius: f64,
    pub n_trials: usize,
    pub exceedances: usize,
    pub frequency: f64,
    /// `2·exp(−δ²/2)`
    pub bound: f64,
    /// Binomial standard error at `min(bound, 1)`.
    pub stderr: f64,
    pub passed: bool,
}

/// Options for [`concentration_sweep`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationSetup {
    pub integrand: Integrand,
    pub n_agents: usize,
    pub k: usize,
    pub n_trials: usize,
    /// Multiplies the analytic Lipschitz constant; values below 1 shrink the
    /// radius below what the bound guarantees.
    pub lipschitz_scale: f64,
    pub state_diameter: f64,
    pub seed: u64,
}

/// Exceedance frequency of the deviation radius for each `δ`, sharing
/// one set of trials across all `δ`. Trial `r` uses stream `(seed, Oracle, r)`.
pub fn concentration_sweep(
    flow: &AnalyticFlow,
    states: &[Vec<f64>],
    deltas: &[f64],
    setup: &ConcentrationSetup,
) -> Result<Vec<ConcentrationRow>> {
    flow.validate()?;
    let n = setup.n_agents;
    if states.len() != n {
        return Err(Error::dim("concentration states", n, states.len()));
    }
    if setup.k == 0 || setup.n_trials == 0 {
        return Err(Error::Usage(
            "concentration needs k ≥ 1 and n_trials ≥ 1".into(),
        ));
    }
    let (truth, diameter) = match setup.integrand {
        Integrand::Outflow => (quadrature_integral(flow, states, 16)?, flow.diameter(n)),
        Integrand::Inflow => (
            inflow_quadrature(flow, states, 16)?,
            flow.diameter(n) + setup.state_diameter,
        ),
    };
    let deviations: Vec<f64> = (0..setup.n_trials as u64)
        .map(|r| {
            let rng = &mut stream(setup.seed, Domain::Oracle, r);
            let est = match setup.integrand {
                Integrand::Outflow => mc_estimate(flow, states, setup.k, rng),
                Integrand::Inflow => inflow_estimate_with_inverse(flow, states, setup.k, 0.0, rng),
            };
            (est - truth).abs()
        })
        .collect();
    let lipschitz = setup.lipschitz_scale * flow.lipschitz(n);
    Ok(deltas
        .iter()
        .map(|&delta| {
            let radius = delta * lipschitz * flow.measure(n) * diameter / (setup.k as f64).sqrt();
            let exceedances = deviations
                .iter()
                .filter(|&&d| d > 0.0 && d >= radius)
                .count();
            let frequency = exceedances as f64 / setup.n_trials as f64;
            let bound = 2.0 * (-delta * delta / 2.0).exp();
            let p = bound.min(1.0);
            let stderr = (p * (1.0 - p) / setup.n_trials as f64).sqrt();
            ConcentrationRow {
                integrand: setup.integrand,
                n_agents: n,
                k: setup.k,
                delta,
                lipschitz,
                radius,
                n_trials: setup.n_trials,
                exceedances,
                frequency,
                bound,
                stderr,
                passed: frequency <= bound + 3.0 * stderr,
            }
        })
        .collect())
}

/// Single-`δ` exceedance frequency of the outflow estimator.
pub fn concentration_trial(
    flow: &AnalyticFlow,
    states: &[Vec<f64>],
    k: usize,
    delta: f64,
    n_trials: usize,
    seed: u64,
) -> Result<ConcentrationRow> {
    let setup = ConcentrationSetup {
        integrand: Integrand::Outflow,
        n_agents: states.len(),
        k,
        n_trials,
        lipschitz_scale: 1.0,
        state_diameter: 0.0,
        seed,
    };
    Ok(concentration_sweep(flow, states, &[delta], &setup)?.remove(0))
}
