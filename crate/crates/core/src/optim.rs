//! Adam and the cosine-annealing warm-restart schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1.0e-8;

/// Adam moments for an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Zero moments shaped like `params`, default hyperparameters.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        AdamState {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update. `names` label the parameters in error messages. All
    /// gradients are checked before anything is modified.
    pub fn step(
        &mut self,
        params: Vec<&mut Tensor>,
        grads: &[Tensor],
        names: &[String],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} parameters, {} gradients, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be nonnegative, got {lr}"
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            if p.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "`{name}`: parameter {:?}, gradient {:?}",
                        p.shape(),
                        g.shape()
                    ),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name));
            }
        }

        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, theta) in p.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts, stepped once per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_lr")]
    pub eta_min: f64,
    /// Epochs in the first cycle.
    #[serde(default = "default_t0")]
    pub t0: usize,
    /// Cycle length multiplier after each restart.
    #[serde(default = "default_t_mult")]
    pub t_mult: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

fn default_lr() -> f64 {
    1.0e-3
}
fn default_t0() -> usize {
    20
}
fn default_t_mult() -> usize {
    1
}
fn default_epochs() -> usize {
    50
}

impl Default for ScheduleConfig {
    /// `base_lr = eta_min = 1e-3`, `t0 = 20`, `t_mult = 1`, 50 epochs.
    fn default() -> Self {
        ScheduleConfig {
            base_lr: default_lr(),
            eta_min: default_lr(),
            t0: default_t0(),
            t_mult: default_t_mult(),
            epochs: default_epochs(),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("schedule.base_lr must be positive".into()));
        }
        if !(0.0..=self.base_lr).contains(&self.eta_min) {
            return Err(Error::Config(
                "schedule.eta_min must lie in [0, base_lr]".into(),
            ));
        }
        if self.t0 == 0 {
            return Err(Error::Config("schedule.t0 must be at least 1".into()));
        }
        if self.t_mult == 0 {
            return Err(Error::Config("schedule.t_mult must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("schedule.epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// Position inside the current cycle: `(t_cur, t_i)`.
    pub fn cycle_position(&self, epoch: usize) -> (usize, usize) {
        let mut t_i = self.t0;
        let mut t_cur = epoch;
        while t_cur >= t_i {
            t_cur -= t_i;
            t_i *= self.t_mult;
        }
        (t_cur, t_i)
    }

    /// `eta_min + ½(base_lr − eta_min)(1 + cos(π·t_cur/t_i))`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let (t_cur, t_i) = self.cycle_position(epoch);
        let phase = std::f64::consts::PI * t_cur as f64 / t_i as f64;
        self.eta_min + 0.5 * (self.base_lr - self.eta_min) * (1.0 + phase.cos())
    }
}
