use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

/// Settings of the momentum-free adaptive optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    /// Decay of the running mean of squared gradients.
    pub rho: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Rate at the last step as a fraction of `lr`, reached along a half
    /// cosine. 1 keeps the rate constant.
    pub final_lr_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-3, rho: 0.99, eps: 1e-8, clip_norm: Some(1.0), final_lr_fraction: 1.0 }
    }
}

impl OptimConfig {
    pub fn with_lr(lr: f64) -> Self {
        OptimConfig { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.eps > 0.0) {
            return Err(Error::Config("rho must lie in [0,1) and eps be positive".into()));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Config(format!("final_lr_fraction {} must lie in (0,1]", self.final_lr_fraction)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        Ok(())
    }

    /// Rate multiplier at `step` of a `total`-step run.
    pub fn lr_factor(&self, step: usize, total: usize) -> f64 {
        if total <= 1 || self.final_lr_fraction == 1.0 {
            return 1.0;
        }
        let progress = step.min(total - 1) as f64 / (total - 1) as f64;
        let f = self.final_lr_fraction;
        f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// RMSprop with bias correction. Only trainable parameters holding a
/// gradient are touched.
#[derive(Clone, Debug)]
pub struct Rmsprop {
    config: OptimConfig,
    square_avg: Vec<Option<Vec<f64>>>,
    steps: u64,
    lr_scale: f64,
}

impl Rmsprop {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Rmsprop { config, square_avg: Vec::new(), steps: 0, lr_scale: 1.0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Multiplies the configured rate for the following steps.
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore) -> f64 {
        self.steps += 1;
        if self.square_avg.len() < store.len() {
            self.square_avg.resize(store.len(), None);
        }
        let ids = store.trainable_ids();
        let norm = ids
            .iter()
            .filter_map(|&id| store.get(id).grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let OptimConfig { lr, rho, eps, .. } = self.config;
        let lr = lr * self.lr_scale;
        let correction = 1.0 - rho.powi(self.steps.min(i32::MAX as u64) as i32);
        for id in ids {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.take() else { continue };
            let avg = self.square_avg[id.index()].get_or_insert_with(|| vec![0.0; grad.len()]);
            for ((w, g), s) in p.tensor.data_mut().iter_mut().zip(&grad).zip(avg.iter_mut()) {
                let g = g * scale;
                *s = rho * *s + (1.0 - rho) * g * g;
                *w -= lr * g / ((*s / correction).sqrt() + eps);
            }
        }
        norm
    }
}
