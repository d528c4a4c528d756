//! Log-scale flow-matching loss with Monte-Carlo inflow/outflow estimates.
//!
//! For every state `s_t` of a trajectory except `s_0`:
//!
//! ```text
//! Inflows  = Π_i Σ_k exp F_i^log(G(o_t^i, a^{i,k}), a^{i,k})
//! Outflows = R(s_t) + Π_i Σ_k exp F_i^log(o_t^i, a'^{i,k})
//! loss     = Σ_t [log(ε + Inflows) − log(ε + Outflows)]²
//! ```
//!
//! Products of sums are evaluated as `exp(Σ_i logsumexp_k(·))`, and the
//! `log(ε + ·)` wrappers as `logaddexp(log ε, ·)`, so nothing is
//! exponentiated before it is reduced. In boundary mode the terminal state
//! has no outgoing flow and its outflow is `R(s_T)` alone.
//!
//! Two optional corrections to the inflow side:
//!
//! - [`InflowEstimator::Joint`] draws `K̂` joint candidates, computes every
//!   agent's exact parent observation from the whole joint action, and sums
//!   the product of edge flows over candidates. The factorized form guesses
//!   each agent's parent from its own action only, which misplaces the
//!   relative positions of other agents.
//! - [`InitialInflow::Exact`] uses the one real parent of every `s_1`, the
//!   start state, instead of integrating over parents that are never
//!   visited. Without it the start-state policy is not tied to the loss.
//!
//! Both keep the factorized estimator's scale, `(K̂ / |A|)^N` times the
//! integral, so they can be switched per run.
//!
//! With a [`ParentRegion`], joint candidates whose parent could not have
//! been visited at `t − 1` contribute no inflow.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, InverseModel};
use crate::sampler::{uniform_actions, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalOutflowMode {
    /// Terminal outflow is the reward only.
    Boundary,
    /// Terminal outflow is the reward plus the sampled flow product.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InflowEstimator {
    /// Product over agents of per-agent candidate sums.
    #[default]
    Factorized,
    /// Sum over joint candidates of the product of edge flows.
    Joint,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialInflow {
    /// Same Monte-Carlo estimate as every other state.
    #[default]
    Estimated,
    /// Edge flow from the start state along the action actually taken.
    Exact,
}

/// Joint positions a parent state at time `t` can occupy: inside the arena
/// and, when every episode starts from the same positions, within
/// `t · per_step` of them in every coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct ParentRegion {
    pub half_width: f64,
    pub reach: Option<Reach>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reach {
    /// Joint start positions, agent-major.
    pub start: Vec<f64>,
    pub per_step: f64,
}

impl ParentRegion {
    pub fn contains(&self, positions: &[f64], t: usize) -> bool {
        let tol = 1e-9 * self.half_width.max(1.0);
        let in_arena = positions.iter().all(|p| p.abs() <= self.half_width + tol);
        in_arena
            && match &self.reach {
                Some(r) => {
                    let limit = t as f64 * r.per_step + tol;
                    positions
                        .iter()
                        .zip(&r.start)
                        .all(|(p, s)| (p - s).abs() <= limit)
                }
                None => true,
            }
    }
}

/// Log flow given to masked candidates. Finite so that gradients stay
/// defined when every candidate of a state is masked.
const MASKED_LOG_FLOW: f64 = -1e30;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub epsilon: f64,
    pub k_hat: usize,
    pub terminal_mode: TerminalOutflowMode,
    pub inflow: InflowEstimator,
    pub initial_inflow: InitialInflow,
    /// Per-dimension action box, used to scale the exact initial inflow.
    pub action_bound: f64,
    /// Joint inflow only: drop candidates whose parent lies outside it.
    pub parent_region: Option<ParentRegion>,
}

/// Log values `log(ε + Inflows)` and `log(ε + Outflows)` of one state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFlows {
    pub trajectory: usize,
    pub t: usize,
    pub log_inflow: f64,
    pub log_outflow: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean over the batch of the per-trajectory loss.
    pub flow_matching_loss: f64,
    pub inverse_loss: f64,
    pub states: Vec<StateFlows>,
}

/// Candidate actions used by one loss evaluation, indexed
/// `[trajectory][t − 1][agent]`, each a `K̂ × action_dim` block. Inflow and
/// outflow draws are independent.
#[derive(Clone, Debug, PartialEq)]
pub struct LossCandidates {
    pub inflow: Vec<Vec<Vec<Vec<f64>>>>,
    pub outflow: Vec<Vec<Vec<Vec<f64>>>>,
}

impl LossCandidates {
    pub fn sample<R: Rng + ?Sized>(
        batch: &[&Trajectory],
        action_dim: usize,
        action_bound: f64,
        k_hat: usize,
        rng: &mut R,
    ) -> Self {
        let draw = |rng: &mut R| -> Vec<Vec<Vec<Vec<f64>>>> {
            batch
                .iter()
                .map(|tr| {
                    (0..tr.len())
                        .map(|_| {
                            (0..tr.n_agents())
                                .map(|_| uniform_actions(rng, k_hat, action_dim, action_bound))
                                .collect()
                        })
                        .collect()
                })
                .collect()
        };
        let inflow = draw(rng);
        let outflow = draw(rng);
        LossCandidates { inflow, outflow }
    }
}

/// `log Π_i Σ_k exp(x_ik)` given each agent's log-flows.
pub fn log_product_of_sums(per_agent: &[Vec<f64>]) -> f64 {
    per_agent.iter().map(|x| logsumexp(x)).sum()
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::LossDiverged(format!("{what} evaluated to {value}")))
    }
}

/// Outflow estimate of one state in linear scale, with the given candidates
/// (one `K̂ × action_dim` block per agent).
pub fn outflow_with_candidates(
    model: &FlowModel,
    observations: &[Vec<f64>],
    reward: f64,
    terminal: bool,
    mode: TerminalOutflowMode,
    candidates: &[Vec<f64>],
) -> Result<f64> {
    if terminal && mode == TerminalOutflowMode::Boundary {
        return Ok(reward);
    }
    let per_agent = observations
        .iter()
        .zip(candidates)
        .enumerate()
        .map(|(i, (o, c))| model.log_flows(i, o, c))
        .collect::<Result<Vec<_>>>()?;
    finite(reward + log_product_of_sums(&per_agent).exp(), "outflow")
}

/// Inflow estimate of one state in linear scale, with the given candidates.
pub fn inflow_with_candidates(
    model: &FlowModel,
    inverse: &InverseModel,
    observations: &[Vec<f64>],
    candidates: &[Vec<f64>],
) -> Result<f64> {
    let mut per_agent = Vec::with_capacity(observations.len());
    for (i, (o, c)) in observations.iter().zip(candidates).enumerate() {
        let parents = inverse.predict_parents(i, o, c)?;
        let ad = model.config().action_dim;
        let mut lf = Vec::with_capacity(parents.rows());
        for (k, a) in c.chunks(ad).enumerate() {
            lf.push(model.log_edge_flow(i, parents.row(k), a)?);
        }
        per_agent.push(lf);
    }
    finite(log_product_of_sums(&per_agent).exp(), "inflow")
}

/// Outflow term with freshly sampled candidates.
#[allow(clippy::too_many_arguments)]
pub fn compute_outflow_term<R: Rng + ?Sized>(
    model: &FlowModel,
    observations: &[Vec<f64>],
    reward: f64,
    k_hat: usize,
    action_bound: f64,
    terminal: bool,
    mode: TerminalOutflowMode,
    rng: &mut R,
) -> Result<f64> {
    let ad = model.config().action_dim;
    let c: Vec<Vec<f64>> = (0..observations.len())
        .map(|_| uniform_actions(rng, k_hat, ad, action_bound))
        .collect();
    outflow_with_candidates(model, observations, reward, terminal, mode, &c)
}

/// Inflow term with freshly sampled candidates.
pub fn compute_inflow_term<R: Rng + ?Sized>(
    model: &FlowModel,
    inverse: &InverseModel,
    observations: &[Vec<f64>],
    k_hat: usize,
    action_bound: f64,
    rng: &mut R,
) -> Result<f64> {
    let ad = model.config().action_dim;
    let c: Vec<Vec<f64>> = (0..observations.len())
        .map(|_| uniform_actions(rng, k_hat, ad, action_bound))
        .collect();
    inflow_with_candidates(model, inverse, observations, &c)
}

/// Batch loss and its gradient with respect to the flow parameters. The
/// inverse model is treated as a constant.
pub fn flow_matching_loss_with(
    model: &FlowModel,
    inverse: &InverseModel,
    batch: &[&Trajectory],
    cfg: &LossConfig,
    cands: &LossCandidates,
) -> Result<(LossReport, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Usage("flow-matching loss on an empty batch".into()));
    }
    let n = model.n_agents();
    let ad = model.config().action_dim;
    let k = cfg.k_hat;

    // Counted states: every non-terminal (b, t ≥ 1) first, then the terminal ones.
    let mut states: Vec<(usize, usize)> = Vec::new();
    for (b, tr) in batch.iter().enumerate() {
        if tr.is_empty() {
            return Err(Error::Usage(format!("trajectory {b} has no transitions")));
        }
        if tr.n_agents() != n {
            return Err(Error::dim("trajectory agents", n, tr.n_agents()));
        }
        states.extend((1..tr.len()).map(|t| (b, t)));
    }
    let n_nonterminal = states.len();
    states.extend(batch.iter().enumerate().map(|(b, tr)| (b, tr.len())));
    let n_out = match cfg.terminal_mode {
        TerminalOutflowMode::Boundary => n_nonterminal,
        TerminalOutflowMode::Literal => states.len(),
    };

    let joint = cfg.inflow == InflowEstimator::Joint;
    let exact_first = |t: usize| t == 1 && cfg.initial_inflow == InitialInflow::Exact;
    let params = model.params().values();
    let mut tape = Tape::new(params);
    let mut in_total: Option<NodeId> = None;
    let mut out_total: Option<NodeId> = None;
    let od = model.config().obs_dim;
    let mut joint_actions = vec![0.0; k * n * ad];
    for i in 0..n {
        let net = model.net(i);
        let mut in_rows = Vec::with_capacity(states.len() * k * (od + ad));
        for &(b, t) in &states {
            let rec = &batch[b].records;
            let c = &cands.inflow[b][t - 1];
            if c.iter().any(|ci| ci.len() != k * ad) {
                return Err(Error::dim("inflow candidates", k * ad, c[i].len()));
            }
            if exact_first(t) {
                let a0 = rec[0]
                    .action
                    .as_deref()
                    .expect("non-terminal record has an action");
                for _ in 0..k {
                    in_rows.extend_from_slice(&rec[0].observations[i]);
                    in_rows.extend_from_slice(&a0[i * ad..(i + 1) * ad]);
                }
                continue;
            }
            let o = &rec[t].observations[i];
            let parents = if joint {
                for kk in 0..k {
                    for j in 0..n {
                        joint_actions[(kk * n + j) * ad..(kk * n + j + 1) * ad]
                            .copy_from_slice(&c[j][kk * ad..(kk + 1) * ad]);
                    }
                }
                inverse.joint_parents(i, o, &joint_actions)?
            } else {
                inverse.predict_parents(i, o, &c[i])?
            };
            for (kk, a) in c[i].chunks(ad).enumerate() {
                in_rows.extend_from_slice(parents.row(kk));
                in_rows.extend_from_slice(a);
            }
        }
        let x = tape.leaf(Matrix::from_vec(states.len() * k, od + ad, in_rows)?);
        let y = net.forward_tape(&mut tape, x)?;
        // Joint mode multiplies edge flows per candidate before summing;
        // factorized mode sums per agent and multiplies the sums.
        let term = if joint {
            y
        } else {
            tape.segment_logsumexp(y, k)?
        };
        in_total = Some(match in_total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });

        if n_out > 0 {
            let mut out_rows = Vec::with_capacity(n_out * k * (od + ad));
            for &(b, t) in &states[..n_out] {
                let o = &batch[b].records[t].observations[i];
                let c = &cands.outflow[b][t - 1][i];
                if c.len() != k * ad {
                    return Err(Error::dim("outflow candidates", k * ad, c.len()));
                }
                for a in c.chunks(ad) {
                    out_rows.extend_from_slice(o);
                    out_rows.extend_from_slice(a);
                }
            }
            let x = tape.leaf(Matrix::from_vec(n_out * k, od + ad, out_rows)?);
            let y = net.forward_tape(&mut tape, x)?;
            let lse = tape.segment_logsumexp(y, k)?;
            out_total = Some(match out_total {
                None => lse,
                Some(acc) => tape.add(acc, lse)?,
            });
        }
    }
    let mut in_total = in_total.expect("at least one agent");
    if joint {
        if let Some(region) = &cfg.parent_region {
            let mut mask = Vec::with_capacity(states.len() * k);
            let mut parent = Vec::new();
            for &(b, t) in &states {
                if exact_first(t) {
                    mask.extend(std::iter::repeat_n(0.0, k));
                    continue;
                }
                let positions = &batch[b].records[t].state.agents;
                let c = &cands.inflow[b][t - 1];
                for kk in 0..k {
                    parent.clear();
                    for j in 0..n {
                        let a = &c[j][kk * ad..(kk + 1) * ad];
                        parent.extend(
                            positions[j * ad..(j + 1) * ad]
                                .iter()
                                .zip(a)
                                .map(|(x, a)| x - a),
                        );
                    }
                    mask.push(if region.contains(&parent, t - 1) {
                        0.0
                    } else {
                        MASKED_LOG_FLOW
                    });
                }
            }
            if mask.iter().any(|&m| m != 0.0) {
                let mask = tape.leaf(Matrix::column(mask));
                in_total = tape.add(in_total, mask)?;
            }
        }
        in_total = tape.segment_logsumexp(in_total, k)?;
    }
    // Bring every inflow to the factorized scale: joint sums cover K̂ of
    // the K̂^N grid points, and the exact initial inflow is a density that
    // the factorized sums would multiply by (K̂ / |A|)^N.
    let ln_k = (k as f64).ln();
    let ln_volume = ad as f64 * (2.0 * cfg.action_bound).ln();
    let offsets: Vec<f64> = states
        .iter()
        .map(|&(_, t)| {
            if exact_first(t) {
                // K̂ identical rows already contributed ln K̂ per reduction.
                let reductions = if joint { 1.0 } else { n as f64 };
                (n as f64 - reductions) * ln_k - n as f64 * ln_volume
            } else if joint {
                (n - 1) as f64 * ln_k
            } else {
                0.0
            }
        })
        .collect();
    if offsets.iter().any(|&o| o != 0.0) {
        let shift = tape.leaf(Matrix::column(offsets));
        in_total = tape.add(in_total, shift)?;
    }

    let log_eps = cfg.epsilon.ln();
    let reward = |&(b, t): &(usize, usize)| batch[b].records[t].reward;
    let log_in = tape.log_add_exp_const(in_total, vec![log_eps; states.len()])?;
    let mut out_parts = Vec::new();
    if let Some(out_total) = out_total {
        let consts = states[..n_out]
            .iter()
            .map(|s| (cfg.epsilon + reward(s)).ln())
            .collect();
        out_parts.push(tape.log_add_exp_const(out_total, consts)?);
    }
    if n_out < states.len() {
        let consts: Vec<f64> = states[n_out..]
            .iter()
            .map(|s| (cfg.epsilon + reward(s)).ln())
            .collect();
        out_parts.push(tape.leaf(Matrix::column(consts)));
    }
    let log_out = tape.concat_rows(&out_parts)?;
    let diff = tape.sub(log_in, log_out)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    let loss = tape.scale(total, 1.0 / batch.len() as f64);
    let value = finite(tape.value(loss).get(0, 0), "flow-matching loss")?;

    let report = LossReport {
        flow_matching_loss: value,
        inverse_loss: 0.0,
        states: states
            .iter()
            .enumerate()
            .map(|(r, &(b, t))| StateFlows {
                trajectory: b,
                t,
                log_inflow: tape.value(log_in).data()[r],
                log_outflow: tape.value(log_out).data()[r],
            })
            .collect(),
    };
    let grads = tape.backward(loss, 1.0)?.into_params();
    Ok((report, grads))
}

/// Loss of a single trajectory with freshly sampled candidates.
pub fn flow_matching_loss<R: Rng + ?Sized>(
    model: &FlowModel,
    inverse: &InverseModel,
    trajectory: &Trajectory,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossReport> {
    let batch = [trajectory];
    let cands = LossCandidates::sample(
        &batch,
        model.config().action_dim,
        cfg.action_bound,
        cfg.k_hat,
        rng,
    );
    Ok(flow_matching_loss_with(model, inverse, &batch, cfg, &cands)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Activation, Init};
    use crate::envs::{EnvSpec, Scenario};
    use crate::flow::{FlowNetConfig, ObsLayout};
    use crate::rng::seeded;
    use crate::sampler::{rollout, Policy, SelectMode};
    use proptest::prelude::*;

    fn setup(n: usize, init: Init, seed: u64) -> (EnvSpec, FlowModel, InverseModel) {
        let spec = EnvSpec::new(Scenario::FoodCollection, n);
        let model = FlowModel::new(
            FlowNetConfig {
                n_agents: n,
                obs_dim: spec.obs_dim(),
                action_dim: 2,
                hidden: vec![6],
                activation: Activation::Tanh,
                shared: false,
            },
            init,
            &mut seeded(seed),
        )
        .unwrap();
        let inv = InverseModel::analytic(ObsLayout::from_spec(&spec), 2, n);
        (spec, model, inv)
    }

    fn factorized(
        epsilon: f64,
        k_hat: usize,
        terminal_mode: TerminalOutflowMode,
        action_bound: f64,
    ) -> LossConfig {
        LossConfig {
            epsilon,
            k_hat,
            terminal_mode,
            inflow: InflowEstimator::Factorized,
            initial_inflow: InitialInflow::Estimated,
            action_bound,
            parent_region: None,
        }
    }

    fn obs(spec: &EnvSpec, seed: u64) -> Vec<Vec<f64>> {
        spec.observe_all(&spec.reset(seed))
    }

    #[test]
    fn terminal_boundary_outflow_is_the_reward() {
        let (spec, model, _) = setup(2, Init::Uniform, 1);
        let o = obs(&spec, 0);
        let v = compute_outflow_term(
            &model,
            &o,
            1.7,
            4,
            0.1,
            true,
            TerminalOutflowMode::Boundary,
            &mut seeded(0),
        )
        .unwrap();
        assert_eq!(v, 1.7);
    }

    #[test]
    fn zero_flows_give_k_to_the_n() {
        let (spec, model, inv) = setup(2, Init::Zero, 1);
        let o = obs(&spec, 0);
        let out = compute_outflow_term(
            &model,
            &o,
            0.0,
            4,
            0.1,
            false,
            TerminalOutflowMode::Boundary,
            &mut seeded(0),
        )
        .unwrap();
        let inflow = compute_inflow_term(&model, &inv, &o, 4, 0.1, &mut seeded(0)).unwrap();
        assert!((out - 16.0).abs() < 1e-12);
        assert!((inflow - 16.0).abs() < 1e-12);
    }

    #[test]
    fn single_agent_inflow_is_plain_sum() {
        let (spec, model, inv) = setup(1, Init::Uniform, 5);
        let o = obs(&spec, 2);
        let c = vec![vec![0.05, -0.02, 0.1, 0.1, -0.07, 0.0]];
        let got = inflow_with_candidates(&model, &inv, &o, &c).unwrap();
        let expected: f64 = c[0]
            .chunks(2)
            .map(|a| {
                let parent = inv.predict_parent(0, &o[0], a).unwrap();
                model.log_edge_flow(0, &parent, a).unwrap().exp()
            })
            .sum();
        assert!((got - expected).abs() <= 1e-13 * expected);
    }

    proptest! {
        #[test]
        fn log_space_matches_naive_arithmetic(
            flows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 1..8), 1..4)
        ) {
            let naive: f64 = flows.iter().map(|f| f.iter().map(|x| x.exp()).sum::<f64>()).product();
            let logged = log_product_of_sums(&flows).exp();
            prop_assert!((logged - naive).abs() <= 1e-12 * naive);
        }
    }

    fn trajectory(spec: &EnvSpec, model: &FlowModel, seed: u64) -> Trajectory {
        let policy = Policy::Flow {
            model,
            mode: SelectMode::Sample,
            k_hat: 4,
            temperature: 1.0,
        };
        rollout(spec, policy, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn matched_flows_give_zero_loss_and_single_state_arithmetic() {
        let (mut spec, model, inv) = setup(1, Init::Zero, 0);
        spec.horizon = 1;
        let tr = trajectory(&spec, &model, 0);
        // One counted state (the terminal one). Zero flows with K̂ = 2 give
        // inflow 2; choose ε so that ε + inflow = e and reward so that ε + R = 1.
        let eps = std::f64::consts::E - 2.0;
        let mut tr1 = tr.clone();
        tr1.records[1].reward = 1.0 - eps;
        let cfg = factorized(eps, 2, TerminalOutflowMode::Boundary, spec.action_bound);
        let cands = LossCandidates::sample(&[&tr1], 2, spec.action_bound, 2, &mut seeded(1));
        let (rep, _) = flow_matching_loss_with(&model, &inv, &[&tr1], &cfg, &cands).unwrap();
        assert!((rep.flow_matching_loss - 1.0).abs() < 1e-14);

        let mut tr2 = tr;
        tr2.records[1].reward = 2.0;
        let (rep, grads) = flow_matching_loss_with(&model, &inv, &[&tr2], &cfg, &cands).unwrap();
        assert!(rep.flow_matching_loss.abs() < 1e-28);
        assert!(grads.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn report_logs_match_the_standalone_terms() {
        let (spec, model, inv) = setup(2, Init::Uniform, 3);
        let tr = trajectory(&spec, &model, 4);
        let cfg = factorized(0.5, 3, TerminalOutflowMode::Boundary, spec.action_bound);
        let cands = LossCandidates::sample(&[&tr], 2, spec.action_bound, 3, &mut seeded(2));
        let (rep, _) = flow_matching_loss_with(&model, &inv, &[&tr], &cfg, &cands).unwrap();
        assert_eq!(rep.states.len(), spec.horizon);
        let mut direct = 0.0;
        for s in &rep.states {
            let rec = &tr.records[s.t];
            let inflow =
                inflow_with_candidates(&model, &inv, &rec.observations, &cands.inflow[0][s.t - 1])
                    .unwrap();
            let outflow = outflow_with_candidates(
                &model,
                &rec.observations,
                rec.reward,
                rec.terminal,
                cfg.terminal_mode,
                &cands.outflow[0][s.t - 1],
            )
            .unwrap();
            assert!((s.log_inflow - (0.5 + inflow).ln()).abs() < 1e-12);
            assert!((s.log_outflow - (0.5 + outflow).ln()).abs() < 1e-12);
            direct += ((0.5 + inflow).ln() - (0.5 + outflow).ln()).powi(2);
        }
        assert!((rep.flow_matching_loss - direct).abs() < 1e-10 * direct.max(1.0));
        assert!(rep.flow_matching_loss >= 0.0);
    }

    #[test]
    fn literal_mode_adds_terminal_flow_product() {
        let (spec, model, inv) = setup(2, Init::Uniform, 3);
        let o = obs(&spec, 1);
        let c = vec![vec![0.0; 4], vec![0.0; 4]];
        let lit = outflow_with_candidates(&model, &o, 0.3, true, TerminalOutflowMode::Literal, &c)
            .unwrap();
        let bnd = outflow_with_candidates(&model, &o, 0.3, true, TerminalOutflowMode::Boundary, &c)
            .unwrap();
        assert_eq!(bnd, 0.3);
        assert!(lit > 0.3);
        let tr = trajectory(&spec, &model, 4);
        let cfg = factorized(1.0, 2, TerminalOutflowMode::Literal, spec.action_bound);
        let cands = LossCandidates::sample(&[&tr], 2, spec.action_bound, 2, &mut seeded(2));
        let _ = inv;
        let inv = InverseModel::analytic(ObsLayout::from_spec(&spec), 2, 2);
        assert!(flow_matching_loss_with(&model, &inv, &[&tr], &cfg, &cands).is_ok());
    }

    #[test]
    fn joint_and_exact_initial_inflows_match_direct_sums() {
        let (spec, model, inv) = setup(2, Init::Uniform, 8);
        let tr = trajectory(&spec, &model, 9);
        let (k, n, eps) = (3, 2, 0.25);
        let cfg = LossConfig {
            inflow: InflowEstimator::Joint,
            initial_inflow: InitialInflow::Exact,
            ..factorized(eps, k, TerminalOutflowMode::Boundary, spec.action_bound)
        };
        let cands = LossCandidates::sample(&[&tr], 2, spec.action_bound, k, &mut seeded(3));
        let (rep, _) = flow_matching_loss_with(&model, &inv, &[&tr], &cfg, &cands).unwrap();
        let volume = (2.0 * spec.action_bound).powi(2);
        for s in &rep.states {
            let rec = &tr.records[s.t];
            let direct = if s.t == 1 {
                let a0 = tr.records[0].action.as_ref().unwrap();
                let flow: f64 = (0..n)
                    .map(|i| {
                        model
                            .log_edge_flow(i, &tr.records[0].observations[i], &a0[2 * i..2 * i + 2])
                            .unwrap()
                    })
                    .sum::<f64>()
                    .exp();
                (k as f64 / volume).powi(n as i32) * flow
            } else {
                let c = &cands.inflow[0][s.t - 1];
                let mut sum = 0.0;
                for kk in 0..k {
                    let joint: Vec<f64> = (0..n)
                        .flat_map(|j| c[j][2 * kk..2 * kk + 2].to_vec())
                        .collect();
                    let mut log_flow = 0.0;
                    for i in 0..n {
                        let parent = inv
                            .joint_parents(i, &rec.observations[i], &joint)
                            .unwrap()
                            .into_vec();
                        log_flow += model
                            .log_edge_flow(i, &parent, &joint[2 * i..2 * i + 2])
                            .unwrap();
                    }
                    sum += log_flow.exp();
                }
                sum * (k as f64).powi(n as i32 - 1)
            };
            assert!(
                (s.log_inflow - (eps + direct).ln()).abs() < 1e-12,
                "t = {}",
                s.t
            );
        }
    }

    #[test]
    fn parent_region_limits_reach_by_time() {
        let region = ParentRegion {
            half_width: 1.0,
            reach: Some(Reach {
                start: vec![0.0, 0.0],
                per_step: 0.25,
            }),
        };
        assert!(region.contains(&[0.0, 0.0], 0));
        assert!(!region.contains(&[0.1, 0.0], 0));
        assert!(region.contains(&[0.5, -0.5], 2));
        assert!(!region.contains(&[0.5, -0.6], 2));
        assert!(region.contains(&[1.0, -1.0], 9));
        let shifted = ParentRegion {
            half_width: 1.0,
            reach: Some(Reach {
                start: vec![0.8, -0.2],
                per_step: 0.25,
            }),
        };
        assert!(shifted.contains(&[1.0, -0.6], 2));
        assert!(!shifted.contains(&[0.2, -0.2], 2));
        assert!(!shifted.contains(&[1.2, -0.2], 9));
        let arena = ParentRegion {
            half_width: 1.0,
            reach: None,
        };
        assert!(arena.contains(&[0.9, -1.0], 0));
        assert!(!arena.contains(&[1.1, 0.0], 5));
    }

    #[test]
    fn masked_joint_inflow_sums_feasible_parents_only() {
        let spec = EnvSpec::new(Scenario::BimodalToy, 2);
        let model = FlowModel::new(
            FlowNetConfig {
                n_agents: 2,
                obs_dim: spec.obs_dim(),
                action_dim: 1,
                hidden: vec![6],
                activation: Activation::Tanh,
                shared: false,
            },
            Init::Uniform,
            &mut seeded(4),
        )
        .unwrap();
        let inv = InverseModel::analytic(ObsLayout::from_spec(&spec), 1, 2);
        let tr = rollout(&spec, Policy::Random, &mut seeded(6)).unwrap();
        let (k, eps, b) = (6, 0.01, spec.action_bound);
        let region = ParentRegion {
            half_width: spec.arena_half_width,
            reach: Some(Reach {
                start: vec![0.0, 0.0],
                per_step: b,
            }),
        };
        let cfg = LossConfig {
            inflow: InflowEstimator::Joint,
            parent_region: Some(region.clone()),
            ..factorized(eps, k, TerminalOutflowMode::Boundary, b)
        };
        let cands = LossCandidates::sample(&[&tr], 1, b, k, &mut seeded(7));
        let (rep, grads) = flow_matching_loss_with(&model, &inv, &[&tr], &cfg, &cands).unwrap();
        assert!(grads.iter().all(|g| g.is_finite()));
        let mut masked = 0;
        for s in &rep.states {
            let rec = &tr.records[s.t];
            let c = &cands.inflow[0][s.t - 1];
            let mut sum = 0.0;
            for (&a0, &a1) in c[0].iter().zip(&c[1]) {
                let joint = [a0, a1];
                let parent = [
                    rec.state.agents[0] - joint[0],
                    rec.state.agents[1] - joint[1],
                ];
                if !region.contains(&parent, s.t - 1) {
                    masked += 1;
                    continue;
                }
                let mut log_flow = 0.0;
                for i in 0..2 {
                    let o = inv
                        .joint_parents(i, &rec.observations[i], &joint)
                        .unwrap()
                        .into_vec();
                    log_flow += model.log_edge_flow(i, &o, &joint[i..i + 1]).unwrap();
                }
                sum += log_flow.exp();
            }
            let direct = sum * k as f64;
            assert!(
                (s.log_inflow - (eps + direct).ln()).abs() < 1e-12,
                "t = {}",
                s.t
            );
        }
        // At t = 1 only the zero action keeps the parent at the start.
        assert!(masked >= k);
    }

    #[test]
    fn joint_inflow_agrees_with_factorized_for_one_agent() {
        let (spec, model, inv) = setup(1, Init::Uniform, 2);
        let tr = trajectory(&spec, &model, 1);
        let base = factorized(1.0, 4, TerminalOutflowMode::Boundary, spec.action_bound);
        let joint = LossConfig {
            inflow: InflowEstimator::Joint,
            ..base.clone()
        };
        let cands = LossCandidates::sample(&[&tr], 2, spec.action_bound, 4, &mut seeded(5));
        let (a, ga) = flow_matching_loss_with(&model, &inv, &[&tr], &base, &cands).unwrap();
        let (b, gb) = flow_matching_loss_with(&model, &inv, &[&tr], &joint, &cands).unwrap();
        // One agent has no relative entries to correct, only static entities.
        assert!(
            (a.flow_matching_loss - b.flow_matching_loss).abs()
                < 1e-12 * a.flow_matching_loss.max(1.0)
        );
        for (x, y) in ga.iter().zip(&gb) {
            assert!((x - y).abs() < 1e-10 * x.abs().max(1.0));
        }
    }
}
