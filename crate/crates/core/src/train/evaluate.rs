use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::BaseNetwork;
use crate::plugin::JointModel;
use crate::synth::dataset::{Example, TaskInfo, TaskKind};
use crate::synth::metrics::{self, argmax, Confusion, Metric};
use crate::tensor::Tensor;

/// Anything that maps an input and partial evidence to output logits.
pub trait Predictor: Sync {
    fn predict(&self, x: &Tensor, pe: &Tensor) -> Result<Tensor>;
}

impl Predictor for BaseNetwork<f32> {
    /// The base never sees partial evidence.
    fn predict(&self, x: &Tensor, _pe: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

impl Predictor for JointModel<f32> {
    fn predict(&self, x: &Tensor, pe: &Tensor) -> Result<Tensor> {
        self.forward(x, pe)
    }
}

/// Every metric the task supports.
pub fn default_metrics(task: TaskKind) -> Vec<Metric> {
    match task {
        TaskKind::Hierarchical => vec![Metric::McAcc, Metric::Map, Metric::IouAcc],
        TaskKind::Multilabel => vec![Metric::Map],
        TaskKind::Segmentation => vec![Metric::MeanIou, Metric::PixelAcc],
    }
}

/// The metric used for model selection.
pub fn selection_metric(task: TaskKind) -> Metric {
    match task {
        TaskKind::Hierarchical => Metric::McAcc,
        TaskKind::Multilabel => Metric::Map,
        TaskKind::Segmentation => Metric::MeanIou,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: BTreeMap<String, f64>,
    pub examples: usize,
}

impl MetricsReport {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.metrics.get(metric.name()).copied()
    }
}

/// Scores `model` on `data`.
///
/// Hierarchical: accuracy, mAP over all fine classes and IoU accuracy.
/// Multilabel: mAP over the unknown labels. Segmentation: mean IoU and pixel
/// accuracy from the confusion matrix accumulated over every pixel.
pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    info: &TaskInfo,
    data: &[Example],
    metrics: &[Metric],
) -> Result<MetricsReport> {
    if metrics.is_empty() {
        return Err(Error::InvalidArgument("no metrics requested".into()));
    }
    if let Some(m) = metrics.iter().find(|m| !m.supports(info.task)) {
        return Err(Error::IncompatibleMetric {
            metric: m.name().into(),
            task: info.task.name().into(),
        });
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let outputs: Vec<Tensor> = data
        .par_iter()
        .map(|ex| model.predict(&ex.input, &ex.pe))
        .collect::<Result<_>>()?;
    let mut report = BTreeMap::new();
    match info.task {
        TaskKind::Hierarchical | TaskKind::Multilabel => {
            let scores: Vec<Vec<f64>> = outputs
                .iter()
                .map(|o| o.values().iter().map(|v| f64::from(*v)).collect())
                .collect();
            let targets: Vec<Vec<bool>> = data
                .iter()
                .map(|ex| ex.target.values().iter().map(|v| *v > 0.5).collect())
                .collect();
            let pred: Vec<usize> = outputs.iter().map(|o| argmax(o.values())).collect();
            let truth: Vec<usize> = data.iter().map(|ex| argmax(ex.target.values())).collect();
            for &m in metrics {
                let value = match m {
                    Metric::McAcc => metrics::mc_accuracy(&pred, &truth)?,
                    Metric::Map => {
                        let classes: Vec<usize> = if info.task == TaskKind::Multilabel {
                            info.unknown_labels()
                        } else {
                            (0..info.classes()).collect()
                        };
                        metrics::mean_ap(&scores, &targets, &classes)?
                    }
                    Metric::IouAcc => {
                        let h = info
                            .hierarchy
                            .ok_or_else(|| Error::InvalidArgument("task has no hierarchy".into()))?;
                        metrics::iou_acc(&pred, &truth, h)?
                    }
                    _ => unreachable!("checked by supports"),
                };
                report.insert(m.name().to_string(), value);
            }
        }
        TaskKind::Segmentation => {
            let classes = info.classes();
            let mut confusion = Confusion::new(classes);
            for (o, ex) in outputs.iter().zip(data) {
                confusion.add(&pixel_labels_channels_first(o)?, &pixel_labels_channels_last(&ex.target))?;
            }
            for &m in metrics {
                let value = match m {
                    Metric::MeanIou => confusion.mean_iou()?,
                    Metric::PixelAcc => confusion.pixel_accuracy()?,
                    _ => unreachable!("checked by supports"),
                };
                report.insert(m.name().to_string(), value);
            }
        }
    }
    Ok(MetricsReport {
        metrics: report,
        examples: data.len(),
    })
}

/// Per-pixel argmax of `[C, H, W]` logits.
pub fn pixel_labels_channels_first(logits: &Tensor) -> Result<Vec<usize>> {
    let &[c, h, w] = logits.shape() else {
        return Err(Error::InvalidShape(format!("expected [C, H, W] logits, got {:?}", logits.shape())));
    };
    let plane = h * w;
    let v = logits.values();
    Ok((0..plane)
        .map(|p| {
            let mut best = 0;
            for ch in 1..c {
                if v[ch * plane + p] > v[best * plane + p] {
                    best = ch;
                }
            }
            best
        })
        .collect())
}

/// Per-pixel argmax of a `[H, W, C]` map.
pub fn pixel_labels_channels_last(map: &Tensor) -> Vec<usize> {
    let c = *map.shape().last().expect("rank >= 1");
    map.values().chunks(c).map(argmax).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::dataset::Hierarchy;

    struct Perfect;
    impl Predictor for Perfect {
        fn predict(&self, _x: &Tensor, pe: &Tensor) -> Result<Tensor> {
            // test data stores the target in pe
            Ok(pe.clone())
        }
    }

    fn hier_data() -> (TaskInfo, Vec<Example>) {
        let info = TaskInfo {
            task: TaskKind::Hierarchical,
            input_shape: vec![1],
            pe_dim: 4,
            target_shape: vec![4],
            known_mask: vec![false; 4],
            unknown_mask: vec![true; 4],
            hierarchy: Some(Hierarchy {
                coarse: 2,
                fine_per_coarse: 2,
            }),
        };
        let data = (0..8)
            .map(|i| {
                let mut t = vec![0.0; 4];
                t[i % 4] = 1.0;
                let t = Tensor::vector(t).unwrap();
                Example {
                    input: Tensor::vector(vec![0.0]).unwrap(),
                    pe: t.clone(),
                    target: t,
                }
            })
            .collect();
        (info, data)
    }

    #[test]
    fn perfect_predictor_scores_full_marks() {
        let (info, data) = hier_data();
        let r = evaluate(&Perfect, &info, &data, &default_metrics(TaskKind::Hierarchical)).unwrap();
        assert_eq!(r.get(Metric::McAcc), Some(100.0));
        assert_eq!(r.get(Metric::Map), Some(100.0));
        assert_eq!(r.get(Metric::IouAcc), Some(100.0));
        assert_eq!(r.examples, 8);
    }

    #[test]
    fn incompatible_metric() {
        let (info, data) = hier_data();
        let err = evaluate(&Perfect, &info, &data, &[Metric::MeanIou]).unwrap_err();
        assert!(matches!(err, Error::IncompatibleMetric { .. }));
        assert!(evaluate(&Perfect, &info, &data, &[]).is_err());
    }

    #[test]
    fn pixel_argmax_layouts() {
        let logits = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(pixel_labels_channels_first(&logits).unwrap(), vec![0, 1]);
        let map = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(pixel_labels_channels_last(&map), vec![0, 1]);
    }
}
