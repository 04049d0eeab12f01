use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub schedule: Schedule,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 10,
            schedule: Schedule::Cosine,
            batch_size: 128,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr0,
            Schedule::Cosine => cosine_lr(self.lr0, epoch, self.epochs).unwrap_or(self.lr0),
        }
    }
}

/// `0.5 · lr0 · (1 + cos(π · epoch / total))`.
pub fn cosine_lr(lr0: f64, epoch: usize, total_epochs: usize) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::Config("cosine schedule needs total_epochs > 0".into()));
    }
    if epoch > total_epochs {
        return Err(Error::Config(format!("epoch {} beyond schedule of {}", epoch, total_epochs)));
    }
    let t = epoch as f64 / total_epochs as f64;
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `g ← g + wd·θ; v ← μ·v + g; θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<K, F> {
    momentum: f64,
    weight_decay: f64,
    buffers: BTreeMap<K, Vec<F>>,
}

impl<K: Ord + Clone, F: Scalar> Sgd<K, F> {
    pub fn new(cfg: &SgdConfig) -> Self {
        Self::with(cfg.momentum, cfg.weight_decay)
    }

    pub fn with(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, buffers: BTreeMap::new() }
    }

    /// Update `param` in place. Entries whose `active` flag is false are left
    /// untouched, momentum buffer included.
    pub fn step(&mut self, key: &K, param: &mut [F], grad: &[F], lr: f64, active: Option<&[bool]>) {
        let buf = self
            .buffers
            .entry(key.clone())
            .or_insert_with(|| vec![F::zero(); param.len()]);
        let (mu, wd, lr) = (
            F::from_f64_lossy(self.momentum),
            F::from_f64_lossy(self.weight_decay),
            F::from_f64_lossy(lr),
        );
        for i in 0..param.len() {
            if active.is_some_and(|a| !a[i]) {
                continue;
            }
            let g = grad[i] + wd * param[i];
            buf[i] = mu * buf[i] + g;
            param[i] = param[i] - lr * buf[i];
        }
    }
}
