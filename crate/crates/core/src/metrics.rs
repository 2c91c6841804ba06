//! Confusion-matrix accumulation and grouped mIoU reporting.
//!
//! Evaluation is always against the full ground truth. At step `t` the
//! "old" group covers classes introduced before `t` (plus background by
//! default — the conventional reading, override with `bg_in_old`), the
//! "new" group covers classes introduced at `t`, and "all" covers
//! background plus every class seen so far. Classes whose union is zero
//! are excluded from group means; a group with no defined class reports
//! no value rather than 0.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::scenario::{ScenarioSpec, TestSample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    /// `counts[gt * num_classes + pred]`
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn accumulate(&mut self, predictions: &[usize], gt: &[usize]) -> Result<()> {
        if predictions.len() != gt.len() {
            return Err(Error::input(format!(
                "{} predictions for {} ground-truth pixels",
                predictions.len(),
                gt.len()
            )));
        }
        for (&p, &g) in predictions.iter().zip(gt) {
            if p >= self.num_classes || g >= self.num_classes {
                return Err(Error::input(format!(
                    "class id out of range: gt {g}, pred {p}, num_classes {}",
                    self.num_classes
                )));
            }
            self.counts[g * self.num_classes + p] += 1;
        }
        Ok(())
    }

    /// Matrix addition; partial matrices from disjoint pixel sets merge
    /// into the matrix of their union.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::input("confusion matrix size mismatch".to_string()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn gt_pixels(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|p| self.count(class, p)).sum()
    }

    /// TP / (TP + FP + FN); `None` when the union is empty.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.count(class, class);
        let fp: u64 = (0..self.num_classes)
            .filter(|&g| g != class)
            .map(|g| self.count(g, class))
            .sum();
        let fn_: u64 = (0..self.num_classes)
            .filter(|&p| p != class)
            .map(|p| self.count(class, p))
            .sum();
        let union = tp + fp + fn_;
        if union == 0 {
            None
        } else {
            Some(tp as f64 / union as f64)
        }
    }
}

pub fn confusion(
    predictions: &[usize],
    gt_full: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(num_classes);
    m.accumulate(predictions, gt_full)?;
    Ok(m)
}

/// Unweighted mean IoU over `group`, skipping classes with zero union.
/// `None` when no class in the group has a defined IoU.
pub fn miou(matrix: &ConfusionMatrix, group: &[usize]) -> Option<f64> {
    let vals: Vec<f64> = group.iter().filter_map(|&c| matrix.iou(c)).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Old/new/all class groups at `step`. Background joins "old" from step 1
/// onward when `bg_in_old` is set (the default reporting convention here).
pub fn class_groups(
    spec: &ScenarioSpec,
    step: usize,
    bg_in_old: bool,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut old = Vec::new();
    if step > 0 {
        if bg_in_old {
            old.push(0);
        }
        old.extend(spec.classes_before(step));
    }
    let new = spec.classes_introduced_at(step);
    let mut all = vec![0];
    all.extend(spec.classes_through(step));
    (old, new, all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub old_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    pub all_classes: Vec<usize>,
    /// IoU per class in the "all" group; classes with zero union omitted.
    pub per_class_iou: BTreeMap<usize, f64>,
    /// Ground-truth pixel count per class over the evaluated set.
    pub gt_pixels: BTreeMap<usize, u64>,
    pub miou_old: Option<f64>,
    pub miou_new: Option<f64>,
    pub miou_all: Option<f64>,
}

/// Argmax predictions for one image; channel index is the class id.
pub fn predict(model: &Model, features: &Tensor) -> Result<Vec<usize>> {
    let fp = model.forward(features)?;
    let n = fp.logits.rows();
    Ok((0..n).map(|i| argmax(fp.logits.row(i))).collect())
}

/// Evaluate `model` on the whole test set against full ground truth.
pub fn evaluate_model(
    model: &Model,
    test_set: &[TestSample],
    spec: &ScenarioSpec,
    step: usize,
    bg_in_old: bool,
) -> Result<StepMetrics> {
    let num_classes = spec.total_classes + 1;
    let mut matrix = ConfusionMatrix::new(num_classes);
    for sample in test_set {
        let pred = predict(model, &sample.features)?;
        matrix.accumulate(&pred, &sample.gt_full)?;
    }
    let (old, new, all) = class_groups(spec, step, bg_in_old);
    let mut per_class_iou = BTreeMap::new();
    for &c in &all {
        if let Some(v) = matrix.iou(c) {
            per_class_iou.insert(c, v);
        }
    }
    let mut gt_pixels = BTreeMap::new();
    for c in 0..num_classes {
        gt_pixels.insert(c, matrix.gt_pixels(c));
    }
    Ok(StepMetrics {
        step,
        miou_old: miou(&matrix, &old),
        miou_new: miou(&matrix, &new),
        miou_all: miou(&matrix, &all),
        old_classes: old,
        new_classes: new,
        all_classes: all,
        per_class_iou,
        gt_pixels,
    })
}
