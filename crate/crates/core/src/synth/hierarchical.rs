//! Coarse/fine classification where fine classes sharing an index are
//! indistinguishable from the input alone.
//!
//! Fine class `(g, i)` with coarse group `g < K` and index `i < M` draws
//! `x ~ N(mu_i, sigma^2 I)`. The mean depends only on `i`, so the input says
//! nothing about `g`. Partial evidence is the one-hot coarse group.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::dataset::{Dataset, Example, Hierarchy, TaskInfo, TaskKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierConfig {
    /// Number of coarse groups `K`.
    pub coarse: usize,
    /// Fine classes per coarse group `M`.
    pub fine_per_coarse: usize,
    pub dim: usize,
    /// Distance between any two class means.
    pub separation: f64,
    pub noise: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for HierConfig {
    fn default() -> Self {
        Self {
            coarse: 4,
            fine_per_coarse: 4,
            dim: 8,
            separation: 4.0,
            noise: 0.5,
            n_train: 4000,
            n_val: 500,
            n_test: 1000,
        }
    }
}

impl HierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse < 2 || self.fine_per_coarse < 2 {
            return Err(Error::Config("hierarchical task needs coarse >= 2 and fine_per_coarse >= 2".into()));
        }
        if self.fine_per_coarse > self.dim {
            return Err(Error::Config("fine_per_coarse must not exceed dim".into()));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) || !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("separation and noise must be positive".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("every split needs at least one example".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.coarse * self.fine_per_coarse
    }

    pub fn hierarchy(&self) -> Hierarchy {
        Hierarchy {
            coarse: self.coarse,
            fine_per_coarse: self.fine_per_coarse,
        }
    }

    /// Mean for fine index `i`: `separation / sqrt(2)` along axis `i`, so all
    /// pairs of means are exactly `separation` apart.
    pub fn mean(&self, i: usize) -> Vec<f64> {
        let mut mu = vec![0.0; self.dim];
        mu[i] = self.separation / std::f64::consts::SQRT_2;
        mu
    }

    pub fn info(&self) -> TaskInfo {
        let classes = self.classes();
        TaskInfo {
            task: TaskKind::Hierarchical,
            input_shape: vec![1, 1, self.dim],
            pe_dim: self.coarse,
            target_shape: vec![classes],
            known_mask: vec![false; classes],
            unknown_mask: vec![true; classes],
            hierarchy: Some(self.hierarchy()),
        }
    }
}

/// Draws `x` for fine index `i`.
pub fn sample_input<R: Rng + ?Sized>(cfg: &HierConfig, i: usize, rng: &mut R) -> Vec<f64> {
    cfg.mean(i)
        .into_iter()
        .map(|m| m + cfg.noise * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn split<R: Rng + ?Sized>(cfg: &HierConfig, n: usize, rng: &mut R) -> Result<Vec<Example>> {
    let classes = cfg.classes();
    let mut labels: Vec<usize> = (0..n).map(|k| k % classes).collect();
    labels.shuffle(rng);
    labels
        .into_iter()
        .map(|fine| {
            let (g, i) = (fine / cfg.fine_per_coarse, fine % cfg.fine_per_coarse);
            let x = sample_input(cfg, i, rng).into_iter().map(|v| v as f32).collect();
            let mut pe = vec![0.0; cfg.coarse];
            pe[g] = 1.0;
            let mut target = vec![0.0; classes];
            target[fine] = 1.0;
            Ok(Example {
                input: Tensor::new(&[1, 1, cfg.dim], x)?,
                pe: Tensor::vector(pe)?,
                target: Tensor::vector(target)?,
            })
        })
        .collect()
}

/// Balanced train/val/test splits; a pure function of `(cfg, seed)`.
pub fn generate(cfg: &HierConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = split(cfg, cfg.n_train, &mut rng)?;
    let val = split(cfg, cfg.n_val, &mut rng)?;
    let test = split(cfg, cfg.n_test, &mut rng)?;
    Ok(Dataset {
        info: cfg.info(),
        train,
        val,
        test,
        generator: serde_json::to_value(cfg)?,
        seed,
    })
}
