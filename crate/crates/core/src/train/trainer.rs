use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::BaseNetwork;
use crate::plugin::JointModel;
use crate::synth::dataset::{Example, TaskInfo};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::adam::AdamState;
use crate::train::config::{lr_schedule, TrainConfig};
use crate::train::evaluate::{default_metrics, evaluate, selection_metric, Predictor};

/// A model whose trainable parameters can be recorded on a tape.
pub trait Trainable: Predictor {
    /// Records the forward pass and returns the output together with the
    /// trainable parameter vars in [`Trainable::param_ids`] order.
    fn record<'t>(&self, tape: &'t Tape, x: &Tensor, pe: &Tensor) -> Result<(Var<'t>, Vec<Var<'t>>)>;
    fn param_ids(&self) -> Vec<String>;
    fn param_values(&self) -> Vec<Tensor>;
    fn params_mut(&mut self) -> Result<Vec<&mut Tensor>>;
}

impl Trainable for BaseNetwork<f32> {
    fn record<'t>(&self, tape: &'t Tape, x: &Tensor, _pe: &Tensor) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let (out, bound) = BaseNetwork::record(self, tape, tape.constant(x))?;
        Ok((out, bound.vars()))
    }

    fn param_ids(&self) -> Vec<String> {
        self.named_params().into_iter().map(|(n, _)| n).collect()
    }

    fn param_values(&self) -> Vec<Tensor> {
        self.params().into_iter().cloned().collect()
    }

    fn params_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        BaseNetwork::params_mut(self)
    }
}

impl Trainable for JointModel<f32> {
    fn record<'t>(&self, tape: &'t Tape, x: &Tensor, pe: &Tensor) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        JointModel::record(self, tape, tape.constant(x), tape.constant(pe))
    }

    fn param_ids(&self) -> Vec<String> {
        self.plugins()
            .iter()
            .enumerate()
            .flat_map(|(k, p)| {
                p.network()
                    .named_params()
                    .into_iter()
                    .map(move |(n, _)| format!("plugin{k}.{n}"))
            })
            .collect()
    }

    fn param_values(&self) -> Vec<Tensor> {
        self.plugins()
            .iter()
            .flat_map(|p| p.network().params().into_iter().cloned())
            .collect()
    }

    fn params_mut(&mut self) -> Result<Vec<&mut Tensor>> {
        let mut out = Vec::new();
        for p in self.plugins_mut() {
            out.extend(p.network_mut().params_mut()?);
        }
        Ok(out)
    }
}

/// One completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Validation metrics.
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept, if any epoch ran.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Loss target mask: `cfg.unknown_mask` repeated over every position of a
/// target with the given shape.
fn loss_mask(target_shape: &[usize], unknown: &[bool]) -> Result<Tensor> {
    let n: usize = target_shape.iter().product();
    let values = (0..n).map(|i| if unknown[i % unknown.len()] { 1.0 } else { 0.0 }).collect();
    Tensor::new(target_shape, values)
}

/// Loss of one example and the gradient of every trainable parameter.
pub fn example_gradients<M: Trainable + ?Sized>(
    model: &M,
    ex: &Example,
    mask: &Tensor,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let tape = Tape::new();
    let (out, params) = model.record(&tape, &ex.input, &ex.pe)?;
    let logits = if out.shape().len() == 3 { out.channels_last()? } else { out };
    let loss = logits.masked_loss(&ex.target, mask, cfg.loss_kind)?;
    let grads = tape.backward(loss)?;
    let value = f64::from(loss.value().values()[0]);
    Ok((value, params.iter().map(|p| grads.get_or_zeros(*p)).collect()))
}

/// Mini-batch Adam on `train`, validating on `val` after every epoch and
/// keeping the parameters of the best validation epoch.
///
/// Per-example gradients are computed in parallel and summed in example
/// order, so results do not depend on the thread count.
pub fn fit<M: Trainable>(
    model: &mut M,
    info: &TaskInfo,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate(info.classes())?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mask = loss_mask(&info.target_shape, &cfg.unknown_mask)?;
    let ids = model.param_ids();
    let lengths: Vec<usize> = model.param_values().iter().map(Tensor::len).collect();
    let mut adam = AdamState::new(&lengths, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let metrics = default_metrics(info.task);
    let select = selection_metric(info.task);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let model_ref: &M = model;
            let results = batch
                .par_iter()
                .map(|&i| example_gradients(model_ref, &train[i], &mask, cfg))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f32;
            let mut total: Vec<Vec<f32>> = lengths.iter().map(|&n| vec![0.0; n]).collect();
            for (loss, grads) in &results {
                loss_sum += loss;
                for (acc, g) in total.iter_mut().zip(grads) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            total.iter_mut().flatten().for_each(|v| *v *= scale);
            let mut params = model.params_mut()?;
            adam.step(&mut params, &total, &ids, lr)?;
        }
        let report = evaluate(&*model, info, val, &metrics)?;
        let score = report.get(select).expect("selection metric evaluated");
        if best.as_ref().is_none_or(|(b, _)| score >= *b) {
            best = Some((score, model.param_values()));
            history.best_epoch = Some(epoch);
        }
        history.records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            metrics: report.metrics,
        });
    }
    if let Some((_, values)) = best {
        for (p, v) in model.params_mut()?.into_iter().zip(values) {
            *p = v;
        }
    }
    Ok(history)
}

/// Trains every parameter of an unfrozen base network.
pub fn train_base(
    net: &mut BaseNetwork<f32>,
    info: &TaskInfo,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if net.is_frozen() {
        return Err(Error::Frozen);
    }
    fit(net, info, train, val, cfg)
}

/// Trains only the plugin parameters of a joint model.
pub fn train_plugins(
    joint: &mut JointModel<f32>,
    info: &TaskInfo,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if !joint.base().is_frozen() {
        return Err(Error::NotFrozen);
    }
    fit(joint, info, train, val, cfg)
}
