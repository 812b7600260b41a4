//! AdamW with linear warmup, cosine decay and global-norm clipping.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    /// Defaults for a run of `total_steps`: betas (0.9, 0.95), eps 1e-8,
    /// weight decay 0.1, 1% warmup, `min_lr = base_lr / 10`, clip at 1.0.
    pub fn for_run(base_lr: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            min_lr: 0.1 * base_lr,
            warmup_steps: total_steps / 100,
            total_steps,
            weight_decay: 0.1,
            betas: (0.9, 0.95),
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }

    /// Learning rate at 0-based step `t`: linear warmup reaching `base_lr` at
    /// `t = warmup`, cosine decay to `min_lr` at `t = total`, then flat.
    pub fn lr(&self, t: usize) -> f64 {
        if t < self.warmup_steps {
            return self.base_lr * (t + 1) as f64 / self.warmup_steps as f64;
        }
        if t >= self.total_steps || self.total_steps <= self.warmup_steps {
            return if t >= self.total_steps { self.min_lr } else { self.base_lr };
        }
        let progress = (t - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

/// Moment accumulators, aligned with a [`ParamStore`] in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Updates applied so far.
    pub step: usize,
}

/// Outcome of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl AdamW {
    pub fn new(config: AdamConfig, params: &ParamStore<f32>) -> Self {
        let m: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self { config, v: m.clone(), m, step: 0 }
    }

    /// Applies one update from the gradients stored in `params`. Weight decay
    /// is decoupled and skips rank-1 tensors (norm gains).
    pub fn step(&mut self, params: &mut ParamStore<f32>) -> Result<StepInfo> {
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        let grad_norm = params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|&g| f64::from(g) * f64::from(g))
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::numeric("adamw", format!("non-finite gradient norm at step {}", self.step)));
        }
        let clip = match self.config.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let lr = self.config.lr(self.step);
        let (b1, b2) = self.config.betas;
        let t = (self.step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.value.rank() >= 2 { self.config.weight_decay } else { 0.0 };
            for (((x, &g), m), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = f64::from(g) * clip;
                let mn = b1 * f64::from(*m) + (1.0 - b1) * g;
                let vn = b2 * f64::from(*v) + (1.0 - b2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = (mn / c1) / ((vn / c2).sqrt() + self.config.eps);
                let xv = f64::from(*x);
                *x = (xv - lr * (update + decay * xv)) as f32;
            }
        }
        self.step += 1;
        Ok(StepInfo { lr, grad_norm })
    }
}
