use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, AdamConfig, AdamState, Init, Matrix, Mlp, ParamStore, Tape};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseMode {
    Learned,
    Analytic,
}

/// Which observation entries are absolute positions and which is time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsLayout {
    pub obs_dim: usize,
    pub pos_dim: usize,
    pub time_index: Option<usize>,
    /// Normalized-time decrement per step (`1/T`).
    pub time_step: f64,
}

impl ObsLayout {
    pub fn from_spec(spec: &EnvSpec) -> Self {
        ObsLayout {
            obs_dim: spec.obs_dim(),
            pos_dim: spec.pos_dim(),
            time_index: Some(spec.time_index()),
            time_step: 1.0 / spec.horizon as f64,
        }
    }

    /// Inverse translation: own position minus action, relative entries
    /// plus action (other agents' moves are unknown and taken as zero),
    /// time stepped back.
    pub fn analytic_parent(&self, o_next: &[f64], action: &[f64]) -> Vec<f64> {
        let mut parent = o_next.to_vec();
        for (p, a) in parent.iter_mut().zip(action).take(self.pos_dim) {
            *p -= a;
        }
        let rel_end = self.time_index.unwrap_or(self.obs_dim);
        for k in self.pos_dim..rel_end {
            parent[k] += action[(k - self.pos_dim) % self.pos_dim];
        }
        if let Some(ti) = self.time_index {
            parent[ti] -= self.time_step;
        }
        parent
    }

    /// Exact parent observation of `agent` when every agent's action is
    /// known: own position minus own action, each other agent's relative
    /// entry shifted by the difference of the two actions, entity entries
    /// plus own action, time stepped back. Arena clamping is ignored.
    pub fn joint_parent(
        &self,
        agent: usize,
        n_agents: usize,
        o_next: &[f64],
        joint_action: &[f64],
    ) -> Vec<f64> {
        let d = self.pos_dim;
        let own = &joint_action[agent * d..(agent + 1) * d];
        let mut parent = o_next.to_vec();
        for (p, a) in parent.iter_mut().zip(own) {
            *p -= a;
        }
        let others = (0..n_agents).filter(|&j| j != agent);
        for (slot, j) in others.enumerate() {
            let theirs = &joint_action[j * d..(j + 1) * d];
            for c in 0..d {
                parent[d * (slot + 1) + c] += own[c] - theirs[c];
            }
        }
        let rel_end = self.time_index.unwrap_or(self.obs_dim);
        for k in d * n_agents..rel_end {
            parent[k] += own[(k - d) % d];
        }
        if let Some(ti) = self.time_index {
            parent[ti] -= self.time_step;
        }
        parent
    }
}

/// One agent's `(o_t, a_t, o_{t+1})` sample for inverse-model regression.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub agent: usize,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub next_obs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
struct Learned {
    net: Mlp,
    store: ParamStore,
    adam: AdamState,
}

/// Parent-observation predictor `G(o_{t+1}, a_t) ≈ o_t`.
///
/// The learned variant is one network shared by all agents, fed
/// `[o_{t+1} | a_t | one-hot(agent)]` and predicting the displacement
/// `o_t − o_{t+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseModel {
    layout: ObsLayout,
    action_dim: usize,
    n_agents: usize,
    learned: Option<Learned>,
}

impl InverseModel {
    pub fn analytic(layout: ObsLayout, action_dim: usize, n_agents: usize) -> Self {
        InverseModel {
            layout,
            action_dim,
            n_agents,
            learned: None,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn learned<R: Rng + ?Sized>(
        layout: ObsLayout,
        action_dim: usize,
        n_agents: usize,
        hidden: &[usize],
        activation: Activation,
        adam: AdamConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![layout.obs_dim + action_dim + n_agents];
        dims.extend(hidden);
        dims.push(layout.obs_dim);
        let mut store = ParamStore::new();
        let net = Mlp::new(
            &mut store,
            "inverse",
            &dims,
            &vec![activation; hidden.len()],
            Init::Uniform,
            rng,
        )?;
        let adam = AdamState::new(store.len(), adam);
        Ok(InverseModel {
            layout,
            action_dim,
            n_agents,
            learned: Some(Learned { net, store, adam }),
        })
    }

    pub fn mode(&self) -> InverseMode {
        if self.learned.is_some() {
            InverseMode::Learned
        } else {
            InverseMode::Analytic
        }
    }

    pub fn layout(&self) -> &ObsLayout {
        &self.layout
    }

    pub fn network(&self) -> Option<(&Mlp, &ParamStore, &AdamState)> {
        self.learned.as_ref().map(|l| (&l.net, &l.store, &l.adam))
    }

    pub(crate) fn restore_learned(&mut self, values: &[f64], adam: AdamState) -> Result<()> {
        let l = self.learned.as_mut().ok_or_else(|| {
            Error::Config("checkpoint has inverse parameters but the model is analytic".into())
        })?;
        l.store.load(values)?;
        if adam.m.len() != l.store.len() {
            return Err(Error::dim(
                "inverse optimizer state",
                l.store.len(),
                adam.m.len(),
            ));
        }
        l.adam = adam;
        Ok(())
    }

    fn net_input(&self, agent: usize, o_next: &[f64], action: &[f64], out: &mut Vec<f64>) {
        out.extend_from_slice(o_next);
        out.extend_from_slice(action);
        out.extend((0..self.n_agents).map(|j| if j == agent { 1.0 } else { 0.0 }));
    }

    /// Parent observations for each row of `actions` (`K × action_dim`),
    /// returned as a `K × obs_dim` matrix.
    pub fn predict_parents(&self, agent: usize, o_next: &[f64], actions: &[f64]) -> Result<Matrix> {
        let (od, ad) = (self.layout.obs_dim, self.action_dim);
        if o_next.len() != od {
            return Err(Error::dim("predict_parent observation", od, o_next.len()));
        }
        if ad == 0 || !actions.len().is_multiple_of(ad) {
            return Err(Error::dim("predict_parent actions", ad, actions.len()));
        }
        if agent >= self.n_agents {
            return Err(Error::Usage(format!("agent index {agent} out of range")));
        }
        let k = actions.len() / ad;
        match &self.learned {
            None => {
                let mut data = Vec::with_capacity(k * od);
                for a in actions.chunks(ad) {
                    data.extend(self.layout.analytic_parent(o_next, a));
                }
                Matrix::from_vec(k, od, data)
            }
            Some(l) => {
                let width = od + ad + self.n_agents;
                let mut data = Vec::with_capacity(k * width);
                for a in actions.chunks(ad) {
                    self.net_input(agent, o_next, a, &mut data);
                }
                let mut delta = l
                    .net
                    .eval(l.store.values(), &Matrix::from_vec(k, width, data)?)?;
                for row in delta.data_mut().chunks_mut(od) {
                    for (d, o) in row.iter_mut().zip(o_next) {
                        *d += o;
                    }
                }
                Ok(delta)
            }
        }
    }

    /// Parent observations of `agent` for each row of `joint_actions`
    /// (`K × (n_agents · action_dim)`). Needs the analytic model, since a
    /// learned model only sees its own agent's action.
    pub fn joint_parents(
        &self,
        agent: usize,
        o_next: &[f64],
        joint_actions: &[f64],
    ) -> Result<Matrix> {
        let (od, width) = (self.layout.obs_dim, self.n_agents * self.action_dim);
        if self.learned.is_some() {
            return Err(Error::Config(
                "the joint inflow estimator needs model.inverse_mode = \"analytic\"".into(),
            ));
        }
        if self.action_dim != self.layout.pos_dim {
            return Err(Error::dim(
                "joint parent action",
                self.layout.pos_dim,
                self.action_dim,
            ));
        }
        if o_next.len() != od {
            return Err(Error::dim("joint parent observation", od, o_next.len()));
        }
        if agent >= self.n_agents || !joint_actions.len().is_multiple_of(width) {
            return Err(Error::dim(
                "joint parent actions",
                width,
                joint_actions.len(),
            ));
        }
        let k = joint_actions.len() / width;
        let mut data = Vec::with_capacity(k * od);
        for a in joint_actions.chunks(width) {
            data.extend(self.layout.joint_parent(agent, self.n_agents, o_next, a));
        }
        Matrix::from_vec(k, od, data)
    }

    pub fn predict_parent(&self, agent: usize, o_next: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict_parents(agent, o_next, action)?.into_vec())
    }

    /// Mean squared error of parent prediction over `batch`.
    pub fn mse(&self, batch: &[Transition]) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for tr in batch {
            let p = self.predict_parent(tr.agent, &tr.next_obs, &tr.action)?;
            total += p
                .iter()
                .zip(&tr.obs)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        Ok(total / (batch.len() * self.layout.obs_dim) as f64)
    }

    /// One Adam step on the mean squared parent-prediction error. Returns
    /// the loss before the step; the analytic model only reports its error.
    pub fn train_step(&mut self, batch: &[Transition]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Usage("train_step on an empty batch".into()));
        }
        let od = self.layout.obs_dim;
        let width = od + self.action_dim + self.n_agents;
        let mut inputs = Vec::with_capacity(batch.len() * width);
        let mut targets = Vec::with_capacity(batch.len() * od);
        for tr in batch {
            self.net_input(tr.agent, &tr.next_obs, &tr.action, &mut inputs);
            targets.extend(tr.obs.iter().zip(&tr.next_obs).map(|(o, n)| o - n));
        }
        let Some(l) = self.learned.as_mut() else {
            return self.mse(batch);
        };
        let (loss, grads) = {
            let mut tape = Tape::new(l.store.values());
            let x = tape.leaf(Matrix::from_vec(batch.len(), width, inputs)?);
            let y = l.net.forward_tape(&mut tape, x)?;
            let target = tape.leaf(Matrix::from_vec(batch.len(), od, targets)?);
            let diff = tape.sub(y, target)?;
            let sq = tape.square(diff);
            let total = tape.sum(sq);
            let loss = tape.scale(total, 1.0 / (batch.len() * od) as f64);
            let value = tape.value(loss).get(0, 0);
            (value, tape.backward(loss, 1.0)?.into_params())
        };
        if !loss.is_finite() {
            return Err(Error::LossDiverged(format!("inverse model loss is {loss}")));
        }
        l.adam.step(l.store.values_mut(), &grads)?;
        Ok(loss)
    }
}
