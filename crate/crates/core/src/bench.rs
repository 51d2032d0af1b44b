//! Inference timing: base forward, joint forward and feedback-prop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbprop::{feedback_prop_infer, FbpropConfig};
use crate::nn::{arch, AttachmentPoint, BaseNetwork};
use crate::plugin::JointModel;
use crate::synth::{Example, TaskInfo};
use crate::tensor::LossKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Discarded runs before timing starts.
    pub warmup: usize,
    pub reps: usize,
    /// Examples processed, one at a time, per timed run.
    pub examples: usize,
    pub fbprop_iterations: usize,
    pub fbprop_step: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 5,
            reps: 30,
            examples: 64,
            fbprop_iterations: 10,
            fbprop_step: 0.1,
        }
    }
}

/// Median wall-clock seconds per timed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub reps: usize,
    pub warmup: usize,
    pub examples: usize,
    pub fbprop_iterations: usize,
    pub base_median_s: f64,
    pub joint_median_s: f64,
    pub fbprop_median_s: f64,
}

impl BenchReport {
    pub fn joint_ratio(&self) -> f64 {
        self.joint_median_s / self.base_median_s
    }

    pub fn fbprop_ratio(&self) -> f64 {
        self.fbprop_median_s / self.base_median_s
    }
}

/// Median of a nonempty sample; the mean of the middle pair for even sizes.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of an empty sample");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Runs `f` `warmup` times untimed, then `reps` times, and returns the
/// median duration in seconds.
pub fn time_median(warmup: usize, reps: usize, f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut fs: [Box<dyn FnMut() -> Result<()>>; 1] = [Box::new(f)];
    Ok(time_medians(warmup, reps, &mut fs)?[0])
}

/// Like [`time_median`] for several workloads at once. Timed runs are
/// interleaved, alternating direction every repetition, so slow drift in
/// machine load hits every workload alike.
pub fn time_medians(warmup: usize, reps: usize, fs: &mut [Box<dyn FnMut() -> Result<()> + '_>]) -> Result<Vec<f64>> {
    if reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    for f in fs.iter_mut() {
        for _ in 0..warmup {
            f()?;
        }
    }
    let mut times = vec![Vec::with_capacity(reps); fs.len()];
    for rep in 0..reps {
        let mut order: Vec<usize> = (0..fs.len()).collect();
        if rep % 2 == 1 {
            order.reverse();
        }
        for k in order {
            let t = Instant::now();
            fs[k]()?;
            times[k].push(t.elapsed().as_secs_f64());
        }
    }
    Ok(times.iter().map(|t| median(t)).collect())
}

/// Feedback-prop settings for a benchmark: updates every convolutional and
/// dense pre-activation below the output, fitting the task's known labels.
pub fn fbprop_config(base: &BaseNetwork, info: &TaskInfo, cfg: &BenchConfig) -> Result<FbpropConfig> {
    let layers = base.layers();
    let last = &layers.last().expect("nonempty network").id;
    let update_points = arch::conv_ids(layers)
        .into_iter()
        .chain(arch::dense_ids(layers))
        .filter(|id| id != last)
        .map(|id| base.attachment_point(&id))
        .collect::<Result<Vec<AttachmentPoint>>>()?;
    let loss_kind = match info.task {
        crate::synth::TaskKind::Multilabel => LossKind::BinaryCrossEntropy,
        _ => LossKind::CrossEntropy,
    };
    Ok(FbpropConfig {
        update_points,
        iterations: cfg.fbprop_iterations,
        step_size: cfg.fbprop_step,
        known_mask: info.known_mask.clone(),
        loss_kind,
    })
}

/// Times the three inference paths on the first `cfg.examples` examples.
pub fn bench(
    base: &BaseNetwork,
    joint: &JointModel,
    info: &TaskInfo,
    data: &[Example],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if cfg.examples == 0 || data.len() < cfg.examples {
        return Err(Error::Config(format!(
            "benchmark needs {} examples, dataset has {}",
            cfg.examples,
            data.len()
        )));
    }
    let batch = &data[..cfg.examples];
    let fb = fbprop_config(base, info, cfg)?;
    crate::fbprop::validate(base, &fb)?;
    let mut runs: [Box<dyn FnMut() -> Result<()>>; 3] = [
        Box::new(|| {
            for ex in batch {
                std::hint::black_box(base.forward(&ex.input)?);
            }
            Ok(())
        }),
        Box::new(|| {
            for ex in batch {
                std::hint::black_box(joint.forward(&ex.input, &ex.pe)?);
            }
            Ok(())
        }),
        Box::new(|| {
            for ex in batch {
                std::hint::black_box(feedback_prop_infer(base, &ex.input, &ex.target, &fb)?);
            }
            Ok(())
        }),
    ];
    let t = time_medians(cfg.warmup, cfg.reps, &mut runs)?;
    let (base_t, joint_t, fb_t) = (t[0], t[1], t[2]);
    Ok(BenchReport {
        reps: cfg.reps,
        warmup: cfg.warmup,
        examples: cfg.examples,
        fbprop_iterations: cfg.fbprop_iterations,
        base_median_s: base_t,
        joint_median_s: joint_t,
        fbprop_median_s: fb_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn warmup_runs_are_not_timed() {
        let mut calls = 0;
        time_median(5, 30, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 35);
        assert!(time_median(0, 0, || Ok(())).is_err());
    }
}
