use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
        }
    }

    /// One bias-corrected Adam update. Gradients and the updated values are
    /// validated before any state is touched, so a diverged step leaves
    /// parameters and moments as they were.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::dim(
                "AdamState::step",
                self.m.len(),
                grads.len().min(params.len()),
            ));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { index });
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = (self.step_count + 1) as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        let mut m_new = Vec::with_capacity(params.len());
        let mut v_new = Vec::with_capacity(params.len());
        let mut p_new = Vec::with_capacity(params.len());
        for (((&p, &g), &m), &v) in params.iter().zip(grads).zip(&self.m).zip(&self.v) {
            let m = beta1 * m + (1.0 - beta1) * g;
            let v = beta2 * v + (1.0 - beta2) * g * g;
            let p = p - lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            if !(p.is_finite() && v.is_finite()) {
                return Err(Error::TrainingDiverged { index: p_new.len() });
            }
            m_new.push(m);
            v_new.push(v);
            p_new.push(p);
        }
        params.copy_from_slice(&p_new);
        self.m = m_new;
        self.v = v_new;
        self.step_count += 1;
        Ok(())
    }
}
