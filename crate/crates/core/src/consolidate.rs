//! Importance-weighted fusion of consecutive models.
//!
//! After a step trains, each parameter that also existed in the previous
//! model may be pulled back toward its old value. Importance is the
//! empirical diagonal Fisher of the previous model on its own training
//! data; only parameters whose importance exceeds a count-scheduled TopK
//! threshold are merged (strictly above — ties keep the new value), with
//! a count-scheduled interpolation weight. Classifier rows introduced by
//! the current step have no old counterpart and are never touched.

use crate::error::{Error, Result};
use crate::model::{Model, ParamVector};
use crate::scenario::StepDataset;

#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    /// Aligned index-for-index with the previous model's parameters.
    pub values: Vec<f64>,
    /// Total pixels that contributed gradients.
    pub sample_count: u64,
}

/// Empirical diagonal Fisher: mean over images of the squared per-image
/// gradient of pixel-mean cross entropy against the step labels.
pub fn fisher_diagonal(model: &Model, data: &StepDataset) -> Result<FisherDiag> {
    if data.images.is_empty() {
        return Err(Error::config("Fisher needs at least one image"));
    }
    let n = model.num_params();
    let mut acc = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut pixels = 0u64;
    for img in &data.images {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let fp = model.forward(&img.features)?;
        model.backward_ce(&fp, &img.gt_step, None, &mut grad)?;
        for (a, g) in acc.iter_mut().zip(&grad) {
            *a += g * g;
        }
        pixels += img.gt_step.len() as u64;
    }
    let m = data.images.len() as f64;
    for a in &mut acc {
        *a /= m;
    }
    Ok(FisherDiag {
        values: acc,
        sample_count: pixels,
    })
}

fn check_counts(counts: &[usize], min_len: usize, what: &str) -> Result<()> {
    if counts.len() < min_len {
        return Err(Error::config(format!(
            "{what} needs class counts for at least {min_len} steps"
        )));
    }
    if counts.contains(&0) {
        return Err(Error::config("class counts must be positive"));
    }
    Ok(())
}

/// Fraction of parameters shielded from the new model, from the class
/// counts `[|C^0|, ..., |C^t|]`. Shrinks toward 1 as the history of old
/// classes outgrows the newly added ones.
pub fn beta(counts: &[usize]) -> Result<f64> {
    check_counts(counts, 2, "beta")?;
    let new = *counts.last().expect("non-empty") as f64;
    let old: usize = counts[..counts.len() - 1].iter().sum();
    let total: usize = counts.iter().sum();
    let exponent = (new - old as f64 - 1.0) / (total as f64 + 1.0);
    Ok(1.0 / (1.0 + exponent.exp()))
}

/// Interpolation weight on the old parameter value, from the class counts
/// `[|C^0|, ..., |C^t|]`. Larger when the new step adds few classes.
pub fn omega(counts: &[usize]) -> Result<f64> {
    check_counts(counts, 1, "omega")?;
    let new = *counts.last().expect("non-empty") as f64;
    let total: usize = counts.iter().sum();
    Ok(1.0 - (new / (total as f64 + 1.0)).sqrt())
}

/// The k-th largest value of `values` (1-based), by selection.
pub fn topk_threshold(values: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > values.len() {
        return Err(Error::config(format!(
            "k = {k} outside 1..={}",
            values.len()
        )));
    }
    let mut copy = values.to_vec();
    let (_, kth, _) = copy.select_nth_unstable_by(k - 1, |a, b| {
        b.partial_cmp(a).expect("finite importance values")
    });
    Ok(*kth)
}

fn check_merge_inputs(theta_old: &ParamVector, theta_new: &ParamVector, omega: f64) -> Result<()> {
    if !theta_old.check_layout() || !theta_new.check_layout() {
        return Err(Error::config("malformed parameter segment map"));
    }
    if !theta_old.is_layout_prefix_of(theta_new) {
        return Err(Error::config(
            "old parameters are not a layout prefix of the new ones",
        ));
    }
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::config(format!("omega {omega} outside [0,1]")));
    }
    Ok(())
}

/// Merge exactly the old-counterpart indices whose importance is strictly
/// above `threshold`; everything else keeps the new value.
pub fn merge_above_threshold(
    theta_old: &ParamVector,
    theta_new: &ParamVector,
    fisher: &FisherDiag,
    threshold: f64,
    omega: f64,
) -> Result<ParamVector> {
    check_merge_inputs(theta_old, theta_new, omega)?;
    if fisher.values.len() != theta_old.values.len() {
        return Err(Error::config(
            "importance values do not align with the old parameters",
        ));
    }
    let mut out = theta_new.clone();
    for i in 0..theta_old.values.len() {
        if fisher.values[i] > threshold {
            out.values[i] = omega * theta_old.values[i] + (1.0 - omega) * theta_new.values[i];
        }
    }
    Ok(out)
}

/// Importance-selective fusion: keep the top `floor(beta * |F|)` share of
/// old parameters (clamped to at least one candidate) pulled toward their
/// old values by `omega`; ties at the threshold stay new.
pub fn selective_merge(
    theta_old: &ParamVector,
    theta_new: &ParamVector,
    fisher: &FisherDiag,
    beta: f64,
    omega: f64,
) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(format!("beta {beta} outside [0,1]")));
    }
    let len = fisher.values.len();
    if len == 0 {
        return Err(Error::config("empty importance vector"));
    }
    let k = ((beta * len as f64).floor() as usize).clamp(1, len);
    let threshold = topk_threshold(&fisher.values, k)?;
    merge_above_threshold(theta_old, theta_new, fisher, threshold, omega)
}

/// Baseline fusion: every old-counterpart index is interpolated, with no
/// importance selection at all.
pub fn uniform_fusion(
    theta_old: &ParamVector,
    theta_new: &ParamVector,
    omega: f64,
) -> Result<ParamVector> {
    check_merge_inputs(theta_old, theta_new, omega)?;
    let mut out = theta_new.clone();
    for i in 0..theta_old.values.len() {
        out.values[i] = omega * theta_old.values[i] + (1.0 - omega) * theta_new.values[i];
    }
    Ok(out)
}
