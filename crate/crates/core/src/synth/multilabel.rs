//! Multi-label task driven by latent binary factors.
//!
//! Each example draws `factors` independent bits. Label `j` is a copy of
//! factor `j % factors`, flipped with probability `flip`. The input image
//! shows only the first `visible_factors` factors, so labels tied to hidden
//! factors can only be recovered through the known labels, which are the
//! partial evidence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::dataset::{Dataset, Example, TaskInfo, TaskKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiConfig {
    /// Labels `0..known` are partial evidence.
    pub known: usize,
    /// Labels `known..known + unknown` must be predicted.
    pub unknown: usize,
    pub factors: usize,
    /// Factors `0..visible_factors` are drawn into the input.
    pub visible_factors: usize,
    pub flip: f64,
    /// Probability that a factor is on.
    pub prior: f64,
    pub input_shape: Vec<usize>,
    pub signal: f64,
    pub noise: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for MultiConfig {
    fn default() -> Self {
        Self {
            known: 10,
            unknown: 10,
            factors: 5,
            visible_factors: 3,
            flip: 0.1,
            prior: 0.3,
            input_shape: vec![1, 8, 8],
            signal: 1.0,
            noise: 0.25,
            n_train: 4000,
            n_val: 500,
            n_test: 2000,
        }
    }
}

impl MultiConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.known == 0 || self.unknown == 0 {
            return fail("multilabel task needs known and unknown labels");
        }
        if self.factors == 0 {
            return fail("multilabel task needs at least one factor");
        }
        if self.visible_factors > self.factors {
            return fail("visible_factors must not exceed factors");
        }
        if !(0.0..=1.0).contains(&self.flip) || !(0.0 < self.prior && self.prior < 1.0) {
            return fail("flip must lie in [0, 1] and prior in (0, 1)");
        }
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return fail("input_shape must be [C, H, W] with positive entries");
        }
        if self.visible_factors > 0 && self.pixels() < self.visible_factors {
            return fail("input has fewer pixels than visible factors");
        }
        if !(self.signal.is_finite() && self.noise.is_finite() && self.noise >= 0.0) {
            return fail("signal and noise must be finite, noise non-negative");
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return fail("every split needs at least one example");
        }
        Ok(())
    }

    pub fn labels(&self) -> usize {
        self.known + self.unknown
    }

    pub fn pixels(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn factor_of(&self, label: usize) -> usize {
        label % self.factors
    }

    pub fn is_visible(&self, factor: usize) -> bool {
        factor < self.visible_factors
    }

    pub fn info(&self) -> TaskInfo {
        let l = self.labels();
        TaskInfo {
            task: TaskKind::Multilabel,
            input_shape: self.input_shape.clone(),
            pe_dim: self.known,
            target_shape: vec![l],
            known_mask: (0..l).map(|j| j < self.known).collect(),
            unknown_mask: (0..l).map(|j| j >= self.known).collect(),
            hierarchy: None,
        }
    }
}

fn example<R: Rng + ?Sized>(cfg: &MultiConfig, signs: &[f64], rng: &mut R) -> Result<Example> {
    let factors: Vec<bool> = (0..cfg.factors).map(|_| rng.random_bool(cfg.prior)).collect();
    let labels: Vec<f32> = (0..cfg.labels())
        .map(|j| {
            let flip = rng.random_bool(cfg.flip);
            if factors[cfg.factor_of(j)] != flip {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let x: Vec<f32> = signs
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let level = if cfg.visible_factors == 0 {
                0.0
            } else if factors[k % cfg.visible_factors] {
                1.0
            } else {
                -1.0
            };
            let n: f64 = rng.sample(StandardNormal);
            (cfg.signal * s * level + cfg.noise * n) as f32
        })
        .collect();
    Ok(Example {
        input: Tensor::new(&cfg.input_shape, x)?,
        pe: Tensor::vector(labels[..cfg.known].to_vec())?,
        target: Tensor::vector(labels)?,
    })
}

/// Train/val/test splits; a pure function of `(cfg, seed)`.
pub fn generate(cfg: &MultiConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signs: Vec<f64> = (0..cfg.pixels())
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let mut split = |n: usize| (0..n).map(|_| example(cfg, &signs, &mut rng)).collect::<Result<Vec<_>>>();
    let train = split(cfg.n_train)?;
    let val = split(cfg.n_val)?;
    let test = split(cfg.n_test)?;
    Ok(Dataset {
        info: cfg.info(),
        train,
        val,
        test,
        generator: serde_json::to_value(cfg)?,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MultiConfig {
        MultiConfig {
            n_train: 400,
            n_val: 10,
            n_test: 10,
            ..MultiConfig::default()
        }
    }

    #[test]
    fn noiseless_copies_agree() {
        let cfg = MultiConfig { flip: 0.0, ..small() };
        let d = generate(&cfg, 1).unwrap();
        for ex in &d.train {
            let t = ex.target.values();
            for j in cfg.known..cfg.labels() {
                let f = cfg.factor_of(j);
                assert_eq!(t[j], t[f], "label {j} vs known copy {f}");
            }
            assert_eq!(&t[..cfg.known], ex.pe.values());
        }
    }

    #[test]
    fn label_rate_matches_prior() {
        let cfg = MultiConfig { n_train: 4000, ..small() };
        let d = generate(&cfg, 2).unwrap();
        let on: f32 = d.train.iter().map(|e| e.target.values().iter().sum::<f32>()).sum();
        let rate = f64::from(on) / (4000.0 * 20.0);
        let expected = cfg.prior * (1.0 - cfg.flip) + (1.0 - cfg.prior) * cfg.flip;
        assert!((rate - expected).abs() < 0.01, "{rate} vs {expected}");
    }

    #[test]
    fn masks_partition_labels() {
        let info = MultiConfig::default().info();
        assert!(info.known_mask.iter().zip(&info.unknown_mask).all(|(k, u)| k != u));
        assert_eq!(info.unknown_labels(), (10..20).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small(), 5).unwrap(), generate(&small(), 5).unwrap());
    }
}
