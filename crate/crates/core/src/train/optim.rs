use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Param;
use crate::numerics::{lit, Array, Scalar};

/// Learning-rate shape after warmup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

/// AdamW hyperparameters and schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    /// Final learning rate of the cosine decay as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            min_lr_ratio: 0.1,
            warmup_steps: 0,
            total_steps: 1,
            schedule: Schedule::Cosine,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }
}

impl OptimConfig {
    /// Learning rate at 1-based `step`: linear warmup to `lr`, then the
    /// schedule down to `lr·min_lr_ratio` at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
                let done = step.saturating_sub(self.warmup_steps).min(span);
                let progress = done as f64 / span as f64;
                let min = self.lr * self.min_lr_ratio;
                min + (self.lr - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Per-step diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// AdamW with decoupled weight decay. Parameters whose kind does not decay
/// (the static connection coefficients) only receive the gradient update.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: OptimConfig,
    m: Vec<Array<T>>,
    v: Vec<Array<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimConfig, params: &[Param<T>]) -> Self {
        let zeros = || params.iter().map(|p| Array::zeros(p.value.shape().to_vec())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Applies one update at 1-based `step`.
    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Array<T>], step: usize) -> Result<StepStats> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::contract(format!(
                "{} parameters, {} gradients, {} optimizer slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        let mut sq = 0.0f64;
        for (p, g) in params.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::contract(format!(
                    "gradient {:?} does not match parameter {} {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            let mut local = 0.0f64;
            for &x in g.data() {
                let x = x.to_f64().unwrap_or(f64::NAN);
                local += x * x;
            }
            if !local.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient in parameter {}", p.name)));
            }
            sq += local;
        }
        let grad_norm = sq.sqrt();
        let clip = if self.cfg.grad_clip > 0.0 && grad_norm > self.cfg.grad_clip {
            self.cfg.grad_clip / grad_norm
        } else {
            1.0
        };
        self.t += 1;
        let lr = self.cfg.lr_at(step);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t, c1, c2) = (lit::<T>(b1), lit::<T>(b2), lit::<T>(1.0 - b1), lit::<T>(1.0 - b2));
        let clip = lit::<T>(clip);
        let step_size = lit::<T>(lr / bc1);
        let inv_bc2 = lit::<T>(1.0 / bc2);
        let eps = lit::<T>(self.cfg.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let decay = if p.kind.decays() {
                lit::<T>(1.0 - lr * self.cfg.weight_decay)
            } else {
                T::one()
            };
            let pd = p.value.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i] * clip;
                let mi = b1t * m.data()[i] + c1 * gi;
                let vi = b2t * v.data()[i] + c2 * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                pd[i] = pd[i] * decay - step_size * mi / ((vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(StepStats { lr, grad_norm })
    }
}
