//! Evaluation metrics, all reported as percentages in `[0, 100]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::dataset::{Hierarchy, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    McAcc,
    Map,
    IouAcc,
    MeanIou,
    PixelAcc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Self::McAcc => "mc_acc",
            Self::Map => "map",
            Self::IouAcc => "iou_acc",
            Self::MeanIou => "mean_iou",
            Self::PixelAcc => "pixel_acc",
        }
    }

    pub fn supports(self, task: TaskKind) -> bool {
        matches!(
            (task, self),
            (TaskKind::Hierarchical, Self::McAcc | Self::Map | Self::IouAcc)
                | (TaskKind::Multilabel, Self::Map)
                | (TaskKind::Segmentation, Self::MeanIou | Self::PixelAcc)
        )
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::McAcc, Self::Map, Self::IouAcc, Self::MeanIou, Self::PixelAcc]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { expected: a, actual: b });
    }
    if a == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Percentage of predictions equal to the target.
pub fn mc_accuracy(pred: &[usize], target: &[usize]) -> Result<f64> {
    check_pair(pred.len(), target.len())?;
    let hits = pred.iter().zip(target).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / pred.len() as f64)
}

/// Non-interpolated average precision of one class: the mean of
/// precision@k over the ranks k holding a positive. Scores are ranked in
/// descending order with ties broken by lower index. `None` when there are
/// no positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<Option<f64>> {
    check_pair(scores.len(), positives.len())?;
    let total = positives.iter().filter(|p| **p).count();
    if total == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(100.0 * sum / total as f64))
}

/// Mean AP over `classes`, where `scores[n][c]` and `targets[n][c]` index
/// example `n` and class `c`. Classes with no positive example are skipped.
pub fn mean_ap(scores: &[Vec<f64>], targets: &[Vec<bool>], classes: &[usize]) -> Result<f64> {
    check_pair(scores.len(), targets.len())?;
    let mut aps = Vec::new();
    for &c in classes {
        let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let t: Vec<bool> = targets.iter().map(|row| row[c]).collect();
        if let Some(ap) = average_precision(&s, &t)? {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        return Err(Error::InvalidArgument("no evaluated class has a positive example".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Mean over examples of `|P ∩ G| / |P ∪ G|`, where `P` holds the
/// predicted fine label and its coarse parent and `G` the true pair.
pub fn iou_acc(pred: &[usize], target: &[usize], hierarchy: Hierarchy) -> Result<f64> {
    check_pair(pred.len(), target.len())?;
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let fine = usize::from(p == t);
            let coarse = usize::from(hierarchy.coarse_of(p) == hierarchy.coarse_of(t));
            let inter = fine + coarse;
            inter as f64 / (4 - inter) as f64
        })
        .sum();
    Ok(100.0 * total / pred.len() as f64)
}

/// Confusion counts `matrix[target][pred]` over `classes` labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], target: &[usize]) -> Result<()> {
        if pred.len() != target.len() {
            return Err(Error::LengthMismatch {
                expected: target.len(),
                actual: pred.len(),
            });
        }
        for (&p, &t) in pred.iter().zip(target) {
            if p >= self.classes || t >= self.classes {
                return Err(Error::InvalidArgument(format!("label out of range 0..{}", self.classes)));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Mean over classes present in the target of `TP / (TP + FP + FN)`.
    pub fn mean_iou(&self) -> Result<f64> {
        let k = self.classes;
        let mut ious = Vec::new();
        for c in 0..k {
            let in_target: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
            if in_target == 0 {
                continue;
            }
            let tp = self.counts[c * k + c];
            let predicted: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
            ious.push(tp as f64 / (in_target + predicted - tp) as f64);
        }
        if ious.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
    }

    /// IoU of one class, or `None` if it appears in neither map.
    pub fn class_iou(&self, c: usize) -> Option<f64> {
        let k = self.classes;
        let tp = self.counts[c * k + c];
        let in_target: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
        let predicted: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
        let union = in_target + predicted - tp;
        (union > 0).then(|| 100.0 * tp as f64 / union as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyInput);
        }
        let diag: u64 = (0..self.classes).map(|c| self.counts[c * self.classes + c]).sum();
        Ok(100.0 * diag as f64 / total as f64)
    }
}

/// Mean IoU of one predicted label map against its target.
pub fn mean_iou(pred: &[usize], target: &[usize], classes: usize) -> Result<f64> {
    check_pair(pred.len(), target.len())?;
    let mut m = Confusion::new(classes);
    m.add(pred, target)?;
    m.mean_iou()
}
