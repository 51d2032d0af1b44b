use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LossKind;

/// Optimization settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss_kind: LossKind,
    /// Output labels that contribute to the loss. Empty means "fill in from
    /// the dataset".
    pub unknown_mask: Vec<bool>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            lr_initial: 1e-3,
            lr_decay_epochs: vec![5, 10],
            lr_decay_factor: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss_kind: LossKind::CrossEntropy,
            unknown_mask: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Checks the config against a model with `classes` output labels.
    pub fn validate(&self, classes: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr_initial.is_finite() && self.lr_initial > 0.0) {
            return fail(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return fail(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return fail("lr_decay_epochs must be strictly increasing".into());
        }
        if self.lr_decay_epochs.iter().any(|&e| e >= self.epochs) {
            return fail("lr_decay_epochs must all be below epochs".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive".into());
        }
        if self.unknown_mask.len() != classes {
            return fail(format!(
                "unknown_mask has {} entries but the model has {classes} outputs",
                self.unknown_mask.len()
            ));
        }
        if !self.unknown_mask.iter().any(|u| *u) {
            return fail("unknown_mask selects no labels".into());
        }
        Ok(())
    }
}

/// `lr_initial * lr_decay_factor^k`, where `k` counts decay epochs `<= epoch`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.lr_initial * cfg.lr_decay_factor.powi(k as i32)
}
