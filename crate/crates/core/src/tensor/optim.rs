use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam hyperparameters plus the step-decay learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    /// Epochs between learning-rate decays.
    pub step_size: usize,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            step_size: 5,
            decay_factor: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.step_size == 0 {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid Adam betas or eps".into()));
        }
        Ok(())
    }
}

/// Running optimizer state for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamConfig,
    learning_rate: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
    epochs: usize,
}

impl OptimState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let shapes: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        Ok(Self {
            learning_rate: config.learning_rate,
            config,
            first: shapes.clone(),
            second: shapes,
            steps: 0,
            epochs: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Marks an epoch boundary; decays the learning rate every `step_size` epochs.
    pub fn end_epoch(&mut self) {
        self.epochs += 1;
        if self.epochs % self.config.step_size == 0 {
            self.learning_rate *= self.config.decay_factor;
        }
    }

    /// One Adam update over every parameter in `params` using their stored gradients.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            let p = params.get(id);
            if p.requires_grad() && p.grad().is_none() {
                return Err(Error::State(format!("missing gradient for {}", params.name(id))));
            }
            if self.first[id.0].len() != p.len() {
                return Err(Error::State(format!("moment shape mismatch for {}", params.name(id))));
            }
        }
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr = self.learning_rate;
        for id in params.ids() {
            let p = params.get_mut(id);
            if !p.requires_grad() {
                continue;
            }
            let g = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first[id.0], &mut self.second[id.0]);
            for (i, w) in p.values_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * c.weight_decay * *w;
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
