//! Bayes-optimal scores of each task with and without partial evidence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::hierarchical::{self, HierConfig};
use crate::synth::metrics::{Confusion, Metric};
use crate::synth::multilabel::MultiConfig;
use crate::synth::segmentation::{self, SegConfig};
use crate::synth::GeneratorConfig;

/// Monte-Carlo oracles draw at least this many samples (pixels for
/// segmentation).
pub const MIN_SAMPLES: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesRates {
    pub metric: Metric,
    pub without_pe: f64,
    pub with_pe: f64,
}

impl BayesRates {
    pub fn gap(&self) -> f64 {
        self.with_pe - self.without_pe
    }
}

pub fn bayes_oracle(cfg: &GeneratorConfig, seed: u64) -> Result<BayesRates> {
    match cfg {
        GeneratorConfig::Hierarchical(c) => hierarchical_oracle(c, MIN_SAMPLES, seed),
        GeneratorConfig::Multilabel(c) => multilabel_oracle(c),
        GeneratorConfig::Segmentation(c) => segmentation_oracle(c, MIN_SAMPLES, seed),
    }
}

/// Accuracy of the Bayes classifier, by Monte Carlo.
///
/// With equal priors and a shared isotropic covariance the Bayes rule for
/// the fine index is the nearest mean. Knowing the coarse group, that index
/// fixes the class. Without it, every group is equally likely, so the best
/// achievable accuracy is the index accuracy divided by the group count.
pub fn hierarchical_oracle(cfg: &HierConfig, samples: usize, seed: u64) -> Result<BayesRates> {
    cfg.validate()?;
    if samples < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!("oracle needs at least {MIN_SAMPLES} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..cfg.fine_per_coarse).map(|i| cfg.mean(i)).collect();
    let mut hits = 0usize;
    for _ in 0..samples {
        let i = rng.random_range(0..cfg.fine_per_coarse);
        let x = hierarchical::sample_input(cfg, i, &mut rng);
        let dist = |mu: &Vec<f64>| -> f64 { x.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum() };
        let mut best = 0;
        for (k, mu) in means.iter().enumerate().skip(1) {
            if dist(mu) < dist(&means[best]) {
                best = k;
            }
        }
        hits += usize::from(best == i);
    }
    let p = 100.0 * hits as f64 / samples as f64;
    Ok(BayesRates {
        metric: Metric::McAcc,
        without_pe: p / cfg.coarse as f64,
        with_pe: p,
    })
}

/// Population average precision of a score distribution given as groups
/// `(mass, positive rate)`. Items sharing a score are ranked in random
/// order, which the integral handles exactly.
pub fn population_ap(groups: &[(f64, f64)]) -> f64 {
    let mut merged: Vec<(f64, f64)> = Vec::new();
    let mut sorted: Vec<(f64, f64)> = groups.iter().copied().filter(|(w, _)| *w > 0.0).collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (w, q) in sorted {
        match merged.last_mut() {
            Some((mw, mq)) if (*mq - q).abs() <= 1e-15 => {
                *mq = (*mq * *mw + q * w) / (*mw + w);
                *mw += w;
            }
            _ => merged.push((w, q)),
        }
    }
    let positives: f64 = merged.iter().map(|(w, q)| w * q).sum();
    if positives <= 0.0 {
        return 0.0;
    }
    let (mut seen, mut tp, mut ap) = (0.0, 0.0, 0.0);
    for (w, q) in merged {
        let area = if seen == 0.0 {
            q * w
        } else {
            q * w + (tp - q * seen) * ((seen + w) / seen).ln()
        };
        ap += q * area;
        seen += w;
        tp += q * w;
    }
    100.0 * ap / positives
}

fn binomial(n: usize, k: usize, p: f64) -> f64 {
    let mut c = 1.0;
    for i in 0..k {
        c *= (n - i) as f64 / (i + 1) as f64;
    }
    c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

/// Exact population mAP over the unknown labels.
///
/// Visible factors are read off the input. A hidden factor is inferred, with
/// partial evidence, from how many of its known copies are on. Without
/// partial evidence it is unknown and every example ties.
pub fn multilabel_oracle(cfg: &MultiConfig) -> Result<BayesRates> {
    cfg.validate()?;
    if let Some(per_factor) = cfg.pixels().checked_div(cfg.visible_factors) {
        let z = cfg.signal.abs() * (per_factor as f64).sqrt() / cfg.noise.max(f64::MIN_POSITIVE);
        if z < 5.0 {
            return Err(Error::Intractable(format!(
                "visible factors are not recoverable from the input (z = {z:.2})"
            )));
        }
    }
    let (p, rho) = (cfg.prior, cfg.flip);
    let visible_groups = [(p, 1.0 - rho), (1.0 - p, rho)];
    let (mut with_sum, mut without_sum) = (0.0, 0.0);
    for j in cfg.known..cfg.labels() {
        let f = cfg.factor_of(j);
        if cfg.is_visible(f) {
            let ap = population_ap(&visible_groups);
            with_sum += ap;
            without_sum += ap;
            continue;
        }
        without_sum += population_ap(&[(1.0, p * (1.0 - rho) + (1.0 - p) * rho)]);
        let m = (0..cfg.known).filter(|&k| cfg.factor_of(k) == f).count();
        if m > 1000 {
            return Err(Error::Intractable(format!("{m} known copies of one factor")));
        }
        let groups: Vec<(f64, f64)> = (0..=m)
            .map(|c| {
                let on = p * binomial(m, c, 1.0 - rho);
                let off = (1.0 - p) * binomial(m, c, rho);
                let mass = on + off;
                let post = if mass > 0.0 { on / mass } else { 0.0 };
                (mass, post * (1.0 - rho) + (1.0 - post) * rho)
            })
            .collect();
        with_sum += population_ap(&groups);
    }
    let n = cfg.unknown as f64;
    Ok(BayesRates {
        metric: Metric::Map,
        without_pe: without_sum / n,
        with_pe: with_sum / n,
    })
}

/// Mean IoU of per-pixel Bayes decisions, by Monte Carlo over scenes.
///
/// The intensity identifies a pixel's look-alike group. The presence vector
/// then names the class; without it the pair ties and the lower class wins.
pub fn segmentation_oracle(cfg: &SegConfig, pixels: usize, seed: u64) -> Result<BayesRates> {
    cfg.validate()?;
    if pixels < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!("oracle needs at least {MIN_SAMPLES} pixels")));
    }
    let mut levels = vec![0.0];
    levels.extend((0..cfg.groups()).map(|g| cfg.intensity(2 * g + 1)));
    let mut gap = f64::INFINITY;
    for (a, x) in levels.iter().enumerate() {
        for y in &levels[a + 1..] {
            gap = gap.min((x - y).abs());
        }
    }
    if cfg.noise > 0.0 && gap / 2.0 / cfg.noise < 4.0 {
        return Err(Error::Intractable("intensity levels overlap under this noise".into()));
    }
    let k = cfg.classes + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut with_pe, mut without_pe) = (Confusion::new(k), Confusion::new(k));
    let scenes = pixels.div_ceil(cfg.size * cfg.size);
    for _ in 0..scenes {
        let shapes = segmentation::sample_shapes(cfg, &mut rng);
        let map = segmentation::label_map(cfg, &shapes);
        let present: Vec<usize> = shapes.iter().map(|s| s.class).collect();
        let (mut a, mut b) = (Vec::with_capacity(map.len()), Vec::with_capacity(map.len()));
        for &c in &map {
            let level = if c == 0 { 0.0 } else { cfg.intensity(c) };
            let x = level + cfg.noise * rng.sample::<f64, _>(StandardNormal);
            let nearest = (0..levels.len())
                .min_by(|&i, &j| (x - levels[i]).abs().total_cmp(&(x - levels[j]).abs()))
                .expect("levels nonempty");
            if nearest == 0 {
                a.push(0);
                b.push(0);
                continue;
            }
            let members = cfg.members(nearest - 1);
            b.push(members[0]);
            a.push(members.iter().copied().find(|m| present.contains(m)).unwrap_or(members[0]));
        }
        with_pe.add(&a, &map)?;
        without_pe.add(&b, &map)?;
    }
    Ok(BayesRates {
        metric: Metric::MeanIou,
        without_pe: without_pe.mean_iou()?,
        with_pe: with_pe.mean_iou()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tied_group_scores_prevalence() {
        assert!((population_ap(&[(1.0, 0.34)]) - 34.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation() {
        assert!((population_ap(&[(0.3, 1.0), (0.7, 0.0)]) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn population_ap_matches_sampled_ranking() {
        // two groups, score order known; compare with a large ranked sample
        let groups = [(0.4, 0.8), (0.6, 0.1)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let mut items: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let (score, q) = if rng.random_bool(0.4) { (1.0, 0.8) } else { (0.0, 0.1) };
                (score + rng.random::<f64>() * 1e-6, rng.random_bool(q))
            })
            .collect();
        items.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (mut hits, mut sum) = (0.0, 0.0);
        for (rank, (_, pos)) in items.iter().enumerate() {
            if *pos {
                hits += 1.0;
                sum += hits / (rank + 1) as f64;
            }
        }
        let sampled = 100.0 * sum / hits;
        assert!((sampled - population_ap(&groups)).abs() < 0.5, "{sampled}");
    }

    #[test]
    fn hierarchical_rates() {
        let r = hierarchical_oracle(&HierConfig::default(), MIN_SAMPLES, 0).unwrap();
        assert!(r.with_pe >= 99.0);
        assert!((r.without_pe - 25.0).abs() < 0.1);
    }

    #[test]
    fn uninformative_evidence_closes_no_gap() {
        let cfg = MultiConfig {
            flip: 0.5,
            ..MultiConfig::default()
        };
        let r = multilabel_oracle(&cfg).unwrap();
        assert!((r.with_pe - r.without_pe).abs() < 1e-12);
    }

    #[test]
    fn multilabel_gap_is_positive() {
        let r = multilabel_oracle(&MultiConfig::default()).unwrap();
        assert!(r.gap() > 5.0, "{r:?}");
    }

    #[test]
    fn noisy_input_is_intractable() {
        let cfg = MultiConfig {
            noise: 10.0,
            ..MultiConfig::default()
        };
        assert!(matches!(multilabel_oracle(&cfg), Err(Error::Intractable(_))));
    }

    #[test]
    fn segmentation_rates() {
        let r = segmentation_oracle(&SegConfig::default(), MIN_SAMPLES, 0).unwrap();
        assert!(r.with_pe > 99.0, "{r:?}");
        assert!(r.without_pe < 80.0, "{r:?}");
    }
}
