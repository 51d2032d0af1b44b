//! Layer-wise feedback-prop inference.
//!
//! For each example, additive offsets on the pre-activations at a set of
//! update points are fitted by gradient descent so that the network's output
//! agrees with the known labels. Base parameters are only ever read.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttachmentPoint, BaseNetwork};
use crate::tensor::{LossKind, Tape, Tensor, Var};

/// Maximum number of times the step size is halved when the known-label
/// loss ends higher than it started.
pub const MAX_HALVINGS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FbpropConfig {
    pub update_points: Vec<AttachmentPoint>,
    pub iterations: usize,
    pub step_size: f64,
    /// Output labels whose values are known at inference time.
    pub known_mask: Vec<bool>,
    #[serde(default = "default_loss")]
    pub loss_kind: LossKind,
}

fn default_loss() -> LossKind {
    LossKind::BinaryCrossEntropy
}

/// Result of one feedback-prop call.
#[derive(Clone, Debug, PartialEq)]
pub struct FbpropOutcome {
    pub output: Tensor,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Step size of the accepted run; zero when the base output was kept.
    pub step_size: f64,
    pub halvings: usize,
}

/// Checks `cfg` against `base` and returns the update layer indices in
/// network order.
pub fn validate(base: &BaseNetwork, cfg: &FbpropConfig) -> Result<Vec<usize>> {
    let classes = *base.output_shape().first().expect("nonempty output");
    if cfg.known_mask.len() != classes {
        return Err(Error::Config(format!(
            "known_mask has {} entries but the network has {classes} outputs",
            cfg.known_mask.len()
        )));
    }
    if !cfg.known_mask.iter().any(|k| *k) {
        return Err(Error::Config("known_mask selects no labels".into()));
    }
    if !(cfg.step_size >= 0.0 && cfg.step_size.is_finite()) {
        return Err(Error::Config("step_size must be finite and non-negative".into()));
    }
    if cfg.update_points.is_empty() {
        return Err(Error::Config("feedback-prop needs at least one update point".into()));
    }
    let last = base.layers().len() - 1;
    let mut indices = Vec::new();
    for p in &cfg.update_points {
        let i = base.validate_point(p)?;
        if i >= last {
            return Err(Error::InvalidAttachment {
                layer: p.layer_id.clone(),
                reason: "update point must lie before the output layer".into(),
            });
        }
        if indices.contains(&i) {
            return Err(Error::InvalidAttachment {
                layer: p.layer_id.clone(),
                reason: "duplicate update point".into(),
            });
        }
        indices.push(i);
    }
    indices.sort_unstable();
    Ok(indices)
}

fn known_loss<'t>(out: Var<'t>, target: &Tensor, mask: &Tensor, kind: LossKind) -> Result<Var<'t>> {
    let logits = if out.shape().len() == 3 { out.channels_last()? } else { out };
    logits.masked_loss(target, mask, kind)
}

struct Problem<'a> {
    base: &'a BaseNetwork,
    indices: &'a [usize],
    start: Tensor,
    target: &'a Tensor,
    mask: Tensor,
    kind: LossKind,
}

impl Problem<'_> {
    /// Loss and, if `with_grad`, offset gradients at the current offsets.
    fn eval(&self, offsets: &[Tensor], with_grad: bool) -> Result<(f64, Tensor, Vec<Vec<f32>>)> {
        let tape = Tape::new();
        let bound = self.base.bind(&tape);
        let deltas: Vec<Var> = offsets.iter().map(|d| tape.leaf(d, with_grad)).collect();
        let first = tape.constant(&self.start).add(deltas[0])?;
        let range = self.indices[0] + 1..self.base.layers().len();
        let out = self.base.run_layers(&bound, range, first, &mut |i, z| {
            match self.indices.iter().position(|&k| k == i) {
                Some(k) => z.add(deltas[k]),
                None => Ok(z),
            }
        })?;
        let loss = known_loss(out, self.target, &self.mask, self.kind)?;
        let value = f64::from(loss.value().values()[0]);
        let grads = if with_grad {
            let g = tape.backward(loss)?;
            deltas.iter().map(|d| g.get_or_zeros(*d)).collect()
        } else {
            Vec::new()
        };
        Ok((value, out.value(), grads))
    }

    fn run(&self, zeros: &[Tensor], iterations: usize, eta: f64) -> Result<(f64, Tensor)> {
        let mut offsets = zeros.to_vec();
        for _ in 0..iterations {
            let (_, _, grads) = self.eval(&offsets, true)?;
            for (d, g) in offsets.iter_mut().zip(&grads) {
                for (v, gv) in d.values_mut().iter_mut().zip(g) {
                    *v -= (eta * f64::from(*gv)) as f32;
                }
            }
        }
        let (loss, out, _) = self.eval(&offsets, false)?;
        Ok((loss, out))
    }
}

/// Feedback-prop prediction for one example.
///
/// `known_targets` has the network's output shape; only entries selected by
/// `cfg.known_mask` are read. With zero iterations or a zero step size the
/// plain base output is returned.
pub fn feedback_prop_infer(
    base: &BaseNetwork,
    x: &Tensor,
    known_targets: &Tensor,
    cfg: &FbpropConfig,
) -> Result<FbpropOutcome> {
    if !base.is_frozen() {
        return Err(Error::NotFrozen);
    }
    let indices = validate(base, cfg)?;
    let (plain, captured) = base.forward_base(x, &cfg.update_points)?;
    let mask = {
        let n = known_targets.len();
        let m = &cfg.known_mask;
        let v = (0..n).map(|i| if m[i % m.len()] { 1.0 } else { 0.0 }).collect();
        let shape: Vec<usize> = if plain.rank() == 3 {
            let s = plain.shape();
            vec![s[1], s[2], s[0]]
        } else {
            plain.shape().to_vec()
        };
        Tensor::new(&shape, v)?
    };
    let first_id = &base.layers()[indices[0]].id;
    let problem = Problem {
        base,
        indices: &indices,
        start: captured[first_id].clone(),
        target: known_targets,
        mask,
        kind: cfg.loss_kind,
    };
    let zeros: Vec<Tensor> = indices
        .iter()
        .map(|&i| Tensor::zeros(base.layer_shape(i)))
        .collect::<Result<_>>()?;
    let initial = {
        let tape = Tape::new();
        let out = tape.constant(&plain);
        f64::from(known_loss(out, known_targets, &problem.mask, cfg.loss_kind)?.value().values()[0])
    };
    let keep_base = |halvings| FbpropOutcome {
        output: plain.clone(),
        initial_loss: initial,
        final_loss: initial,
        step_size: 0.0,
        halvings,
    };
    if cfg.iterations == 0 || cfg.step_size == 0.0 {
        return Ok(keep_base(0));
    }
    let mut eta = cfg.step_size;
    for halvings in 0..=MAX_HALVINGS {
        let (loss, out) = problem.run(&zeros, cfg.iterations, eta)?;
        if loss <= initial {
            return Ok(FbpropOutcome {
                output: out,
                initial_loss: initial,
                final_loss: loss,
                step_size: eta,
                halvings,
            });
        }
        eta /= 2.0;
    }
    Ok(keep_base(MAX_HALVINGS + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch;

    fn setup() -> (BaseNetwork, Tensor, Tensor, FbpropConfig) {
        let mut base = BaseNetwork::build(arch::toy_cls(&[1, 6, 6], 4).unwrap(), &[1, 6, 6], 3).unwrap();
        base.freeze();
        let x = Tensor::new(&[1, 6, 6], (0..36).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let target = Tensor::vector(vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let cfg = FbpropConfig {
            update_points: vec![base.attachment_point("fc1").unwrap(), base.attachment_point("conv2").unwrap()],
            iterations: 10,
            step_size: 0.5,
            known_mask: vec![true, true, false, false],
            loss_kind: LossKind::BinaryCrossEntropy,
        };
        (base, x, target, cfg)
    }

    #[test]
    fn zero_step_is_base_forward() {
        let (base, x, target, mut cfg) = setup();
        let plain = base.forward(&x).unwrap();
        cfg.step_size = 0.0;
        assert!(feedback_prop_infer(&base, &x, &target, &cfg).unwrap().output.bit_eq(&plain));
        cfg.step_size = 0.5;
        cfg.iterations = 0;
        assert!(feedback_prop_infer(&base, &x, &target, &cfg).unwrap().output.bit_eq(&plain));
    }

    #[test]
    fn known_loss_does_not_increase() {
        let (base, x, target, cfg) = setup();
        let out = feedback_prop_infer(&base, &x, &target, &cfg).unwrap();
        assert!(out.final_loss <= out.initial_loss);
        assert!(out.final_loss < out.initial_loss, "{out:?}");
    }

    #[test]
    fn parameters_untouched_and_calls_independent() {
        let (base, x, target, cfg) = setup();
        let before = crate::nn::checkpoint::to_bytes(&base).unwrap();
        let a = feedback_prop_infer(&base, &x, &target, &cfg).unwrap();
        let b = feedback_prop_infer(&base, &x, &target, &cfg).unwrap();
        assert!(a.output.bit_eq(&b.output));
        assert_eq!(before, crate::nn::checkpoint::to_bytes(&base).unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        let (base, x, target, mut cfg) = setup();
        let mut open = base.clone();
        open.unfreeze();
        assert!(matches!(feedback_prop_infer(&open, &x, &target, &cfg), Err(Error::NotFrozen)));
        cfg.known_mask = vec![false; 4];
        assert!(feedback_prop_infer(&base, &x, &target, &cfg).is_err());
        cfg.known_mask = vec![true; 4];
        cfg.update_points = vec![base.attachment_point("fc3").unwrap()];
        assert!(feedback_prop_infer(&base, &x, &target, &cfg).is_err());
    }
}
