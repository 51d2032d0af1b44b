//! Scenes of flat rectangles whose classes come in look-alike pairs.
//!
//! Foreground classes `1..=C` are grouped as `(1, 2), (3, 4), ...`; both
//! members of a group are drawn with the same intensity, so the image alone
//! cannot tell them apart. A scene holds at most one rectangle per group and
//! the partial evidence is the `C`-dim presence vector, which resolves every
//! pair.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::dataset::{Dataset, Example, TaskInfo, TaskKind};
use crate::tensor::Tensor;

const LEVELS: [f64; 4] = [1.0, -1.0, 0.5, -0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub size: usize,
    /// Foreground classes; class 0 is background.
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub noise: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            size: 16,
            classes: 5,
            min_shapes: 1,
            max_shapes: 3,
            min_side: 4,
            max_side: 8,
            noise: 0.05,
            n_train: 2000,
            n_val: 200,
            n_test: 400,
        }
    }
}

/// A rectangle of one class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub class: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    fn overlaps(&self, o: &Shape) -> bool {
        self.top < o.top + o.height
            && o.top < self.top + self.height
            && self.left < o.left + o.width
            && o.left < self.left + self.width
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.size < 8 || !self.size.is_multiple_of(2) {
            return fail("segmentation size must be even and at least 8");
        }
        if self.classes < 3 || self.classes > 2 * LEVELS.len() {
            return fail("segmentation needs between 3 and 8 foreground classes");
        }
        if self.min_shapes > self.max_shapes || self.max_shapes > self.groups() {
            return fail("shape counts must satisfy min <= max <= number of look-alike groups");
        }
        if self.min_side < 2 || self.min_side > self.max_side || self.max_side > self.size {
            return fail("sides must satisfy 2 <= min_side <= max_side <= size");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be non-negative");
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return fail("every split needs at least one example");
        }
        Ok(())
    }

    /// Number of look-alike groups.
    pub fn groups(&self) -> usize {
        self.classes.div_ceil(2)
    }

    /// Group of foreground class `c` (1-based).
    pub fn group_of(&self, class: usize) -> usize {
        (class - 1) / 2
    }

    /// Foreground classes sharing group `g`.
    pub fn members(&self, group: usize) -> Vec<usize> {
        (2 * group + 1..=(2 * group + 2).min(self.classes)).collect()
    }

    pub fn intensity(&self, class: usize) -> f64 {
        LEVELS[self.group_of(class)]
    }

    pub fn info(&self) -> TaskInfo {
        let k = self.classes + 1;
        TaskInfo {
            task: TaskKind::Segmentation,
            input_shape: vec![1, self.size, self.size],
            pe_dim: self.classes,
            target_shape: vec![self.size, self.size, k],
            known_mask: vec![false; k],
            unknown_mask: vec![true; k],
            hierarchy: None,
        }
    }
}

/// Draws the rectangles of one scene.
pub fn sample_shapes<R: Rng + ?Sized>(cfg: &SegConfig, rng: &mut R) -> Vec<Shape> {
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut groups: Vec<usize> = (0..cfg.groups()).collect();
    groups.shuffle(rng);
    let even = |lo: usize, hi: usize, rng: &mut R| 2 * rng.random_range(lo.div_ceil(2)..=hi / 2);
    let mut shapes: Vec<Shape> = Vec::new();
    for &g in &groups[..count] {
        let members = cfg.members(g);
        let class = members[rng.random_range(0..members.len())];
        for _ in 0..50 {
            let height = even(cfg.min_side, cfg.max_side, rng);
            let width = even(cfg.min_side, cfg.max_side, rng);
            let top = even(0, cfg.size - height, rng);
            let left = even(0, cfg.size - width, rng);
            let s = Shape {
                class,
                top,
                left,
                height,
                width,
            };
            if shapes.iter().all(|o| !o.overlaps(&s)) {
                shapes.push(s);
                break;
            }
        }
    }
    shapes
}

/// Per-pixel class map (row-major, 0 = background).
pub fn label_map(cfg: &SegConfig, shapes: &[Shape]) -> Vec<usize> {
    let mut map = vec![0; cfg.size * cfg.size];
    for s in shapes {
        for r in s.top..s.top + s.height {
            for c in s.left..s.left + s.width {
                map[r * cfg.size + c] = s.class;
            }
        }
    }
    map
}

/// Builds an example from explicit shapes.
pub fn render<R: Rng + ?Sized>(cfg: &SegConfig, shapes: &[Shape], rng: &mut R) -> Result<Example> {
    let map = label_map(cfg, shapes);
    let k = cfg.classes + 1;
    let x: Vec<f32> = map
        .iter()
        .map(|&c| {
            let level = if c == 0 { 0.0 } else { cfg.intensity(c) };
            let n: f64 = rng.sample(StandardNormal);
            (level + cfg.noise * n) as f32
        })
        .collect();
    let mut target = vec![0.0; map.len() * k];
    for (p, &c) in map.iter().enumerate() {
        target[p * k + c] = 1.0;
    }
    let mut pe = vec![0.0; cfg.classes];
    for s in shapes {
        pe[s.class - 1] = 1.0;
    }
    Ok(Example {
        input: Tensor::new(&[1, cfg.size, cfg.size], x)?,
        pe: Tensor::vector(pe)?,
        target: Tensor::new(&[cfg.size, cfg.size, k], target)?,
    })
}

/// Train/val/test splits; a pure function of `(cfg, seed)`.
pub fn generate(cfg: &SegConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |n: usize| {
        (0..n)
            .map(|_| {
                let shapes = sample_shapes(cfg, &mut rng);
                render(cfg, &shapes, &mut rng)
            })
            .collect::<Result<Vec<_>>>()
    };
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

    fn small() -> SegConfig {
        SegConfig {
            n_train: 200,
            n_val: 5,
            n_test: 5,
            ..SegConfig::default()
        }
    }

    #[test]
    fn groups_pair_up_classes() {
        let cfg = SegConfig::default();
        assert_eq!(cfg.groups(), 3);
        assert_eq!(cfg.members(0), vec![1, 2]);
        assert_eq!(cfg.members(2), vec![5]);
        assert_eq!(cfg.intensity(1), cfg.intensity(2));
        assert_ne!(cfg.intensity(2), cfg.intensity(3));
    }

    #[test]
    fn presence_counts_classes() {
        let cfg = small();
        let d = generate(&cfg, 4).unwrap();
        for ex in &d.train {
            let k = cfg.classes + 1;
            let mut present = vec![false; k];
            for px in ex.target.values().chunks(k) {
                present[px.iter().position(|v| *v == 1.0).unwrap()] = true;
            }
            let fg = present[1..].iter().filter(|p| **p).count() as f32;
            assert_eq!(ex.pe.values().iter().sum::<f32>(), fg);
            // at most one member of each look-alike group
            for g in 0..cfg.groups() {
                let n = cfg.members(g).iter().filter(|&&c| present[c]).count();
                assert!(n <= 1);
            }
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let cfg = small();
        let ex = render(&cfg, &[], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(ex.target.values().chunks(6).all(|px| px[0] == 1.0));
        assert!(ex.pe.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shapes_do_not_overlap() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let shapes = sample_shapes(&cfg, &mut rng);
            assert!(!shapes.is_empty());
            for (i, a) in shapes.iter().enumerate() {
                assert!(a.top % 2 == 0 && a.left % 2 == 0);
                assert!(a.top + a.height <= cfg.size && a.left + a.width <= cfg.size);
                for b in &shapes[i + 1..] {
                    assert!(!a.overlaps(b));
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small(), 8).unwrap(), generate(&small(), 8).unwrap());
    }
}
