//! Class prototypes and pseudo-labeling strategies for collapsed
//! background pixels.
//!
//! At each step the previous model is frozen. Background pixels of the new
//! step's data may actually belong to old classes; the strategies here
//! assign them labels using the frozen model's probabilities, optionally
//! reweighted by proximity to stored class prototypes (mean embeddings) or
//! filtered by prediction entropy.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{argmax, cross_entropy, softmax, Model};
use crate::scenario::{ImageSample, StepDataset};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 1.0;

/// Stored per-class statistics: mean embeddings (computed with the model of
/// the step that introduced the class), the background mean embedding
/// (refreshed every step), and per-step embedding spread statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeStore {
    /// Foreground class id -> mean embedding of its labeled pixels.
    pub prototypes: BTreeMap<usize, Vec<f64>>,
    /// Mean embedding of pixels that are background both in the step
    /// labels and in the frozen model's prediction.
    pub bg_prototype: Option<Vec<f64>>,
    /// Step -> pooled embedding standard deviation of that step's classes.
    pub sigma_history: BTreeMap<usize, f64>,
    /// Step -> number of foreground classes introduced.
    pub class_counts: BTreeMap<usize, usize>,
}

impl PrototypeStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Foreground classes with a stored prototype, ascending.
    pub fn class_ids(&self) -> Vec<usize> {
        self.prototypes.keys().copied().collect()
    }

    /// Record prototypes for every class introduced by `data`, plus the
    /// step's pooled embedding spread and class count. Call with the model
    /// trained on `data`, before any later step modifies it.
    pub fn record_step(&mut self, model: &Model, data: &StepDataset) -> Result<()> {
        let d = model.embed_dim();
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = data
            .class_set
            .iter()
            .map(|&c| (c, (vec![0.0; d], 0)))
            .collect();
        for img in &data.images {
            let fp = model.forward(&img.features)?;
            let emb = fp.embeddings();
            for (p, &label) in img.gt_step.iter().enumerate() {
                if let Some((sum, n)) = sums.get_mut(&label) {
                    for (s, e) in sum.iter_mut().zip(emb.row(p)) {
                        *s += e;
                    }
                    *n += 1;
                }
            }
        }
        for (c, (sum, n)) in sums {
            if n == 0 {
                return Err(Error::config(format!(
                    "class {c} has no labeled pixels in its step"
                )));
            }
            self.prototypes
                .insert(c, sum.into_iter().map(|s| s / n as f64).collect());
        }
        let sigma = feature_std(model, &data.images, &data.class_set)?;
        self.sigma_history.insert(data.step, sigma);
        self.class_counts.insert(data.step, data.class_set.len());
        Ok(())
    }

    /// Refresh the background prototype from the new step's data: mean
    /// embedding (under the frozen `old_model`) of pixels that are
    /// background in `gt_step` and predicted background by `old_model`.
    /// With no qualifying pixel the previous value is retained; if there
    /// is none yet, the unfiltered step-background mean is used.
    pub fn update_background(&mut self, old_model: &Model, data: &StepDataset) -> Result<()> {
        let d = old_model.embed_dim();
        let mut filtered = (vec![0.0; d], 0usize);
        let mut unfiltered = (vec![0.0; d], 0usize);
        for img in &data.images {
            let fp = old_model.forward(&img.features)?;
            let emb = fp.embeddings();
            for (p, &label) in img.gt_step.iter().enumerate() {
                if label != 0 {
                    continue;
                }
                let row = emb.row(p);
                for (s, e) in unfiltered.0.iter_mut().zip(row) {
                    *s += e;
                }
                unfiltered.1 += 1;
                if argmax(fp.logits.row(p)) == 0 {
                    for (s, e) in filtered.0.iter_mut().zip(row) {
                        *s += e;
                    }
                    filtered.1 += 1;
                }
            }
        }
        let (sum, n) = if filtered.1 > 0 {
            filtered
        } else if self.bg_prototype.is_some() {
            return Ok(());
        } else if unfiltered.1 > 0 {
            unfiltered
        } else {
            // No background pixel at all; neutral origin placeholder.
            (vec![0.0; d], 1)
        };
        self.bg_prototype = Some(sum.into_iter().map(|s| s / n as f64).collect());
        Ok(())
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Softmax over negated prototype distances for one pixel embedding.
/// Entry 0 is background, then stored classes ascending; the minimum
/// distance is subtracted before exponentiation for stability.
pub fn similarity_weights(embedding: &[f64], store: &PrototypeStore, tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::config("tau must be positive"));
    }
    let bg = store
        .bg_prototype
        .as_ref()
        .ok_or_else(|| Error::config("background prototype not yet computed"))?;
    let mut dists = vec![euclidean(embedding, bg)];
    for proto in store.prototypes.values() {
        dists.push(euclidean(embedding, proto));
    }
    let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut row: Vec<f64> = dists.iter().map(|d| (-(d - min) / tau).exp()).collect();
    let sum: f64 = row.iter().sum();
    for v in &mut row {
        *v /= sum;
    }
    Ok(row)
}

fn check_old_width(old_model: &Model, n_old_channels: usize) -> Result<()> {
    if old_model.output_width() != n_old_channels {
        return Err(Error::input(format!(
            "frozen model has {} channels, expected {}",
            old_model.output_width(),
            n_old_channels
        )));
    }
    Ok(())
}

/// Prototype-guided labels: foreground pixels keep their step label;
/// background pixels take the argmax of the frozen model's probabilities
/// reweighted by prototype similarity (channel 0 counting as background,
/// so a pixel may stay background).
pub fn pseudo_labels(
    features: &Tensor,
    gt_step: &[usize],
    old_model: &Model,
    store: &PrototypeStore,
    tau: f64,
) -> Result<Vec<usize>> {
    check_old_width(old_model, 1 + store.prototypes.len())?;
    let fp = old_model.forward(features)?;
    let probs = softmax(&fp.logits);
    let emb = fp.embeddings();
    let n = probs.rows();
    if gt_step.len() != n {
        return Err(Error::input(
            "label map does not match image size".to_string(),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for (p, &label) in gt_step.iter().enumerate() {
        if label > 0 {
            out.push(label);
            continue;
        }
        let kappa = similarity_weights(emb.row(p), store, tau)?;
        let pr = probs.row(p);
        let r: Vec<f64> = kappa.iter().zip(pr).map(|(k, q)| k * q).collect();
        out.push(argmax(&r));
    }
    Ok(out)
}

/// Baseline: background pixels take the frozen model's plain argmax.
pub fn naive_pseudo_labels(
    features: &Tensor,
    gt_step: &[usize],
    old_model: &Model,
) -> Result<Vec<usize>> {
    let fp = old_model.forward(features)?;
    let probs = softmax(&fp.logits);
    if gt_step.len() != probs.rows() {
        return Err(Error::input(
            "label map does not match image size".to_string(),
        ));
    }
    Ok(gt_step
        .iter()
        .enumerate()
        .map(|(p, &label)| {
            if label > 0 {
                label
            } else {
                argmax(probs.row(p))
            }
        })
        .collect())
}

fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Per-predicted-class median prediction entropy over the background
/// pixels of `dataset` (the acceptance thresholds for the median-entropy
/// baseline). Even-sized sets use the mean of the two middle values.
pub fn entropy_medians(old_model: &Model, dataset: &StepDataset) -> Result<BTreeMap<usize, f64>> {
    let mut per_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for img in &dataset.images {
        let fp = old_model.forward(&img.features)?;
        let probs = softmax(&fp.logits);
        for (p, &label) in img.gt_step.iter().enumerate() {
            if label != 0 {
                continue;
            }
            let row = probs.row(p);
            per_class.entry(argmax(row)).or_default().push(entropy(row));
        }
    }
    let mut medians = BTreeMap::new();
    for (c, mut vals) in per_class {
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite entropies"));
        let n = vals.len();
        let median = if n % 2 == 1 {
            vals[n / 2]
        } else {
            (vals[n / 2 - 1] + vals[n / 2]) / 2.0
        };
        medians.insert(c, median);
    }
    Ok(medians)
}

/// Baseline: a background pixel is labeled with the frozen model's argmax
/// only when its prediction entropy is strictly below the median for that
/// predicted class; otherwise it is ignored. Foreground passes through.
pub fn median_entropy_pseudo_labels(
    features: &Tensor,
    gt_step: &[usize],
    old_model: &Model,
    medians: &BTreeMap<usize, f64>,
) -> Result<(Vec<usize>, Vec<bool>)> {
    let fp = old_model.forward(features)?;
    let probs = softmax(&fp.logits);
    let n = probs.rows();
    if gt_step.len() != n {
        return Err(Error::input(
            "label map does not match image size".to_string(),
        ));
    }
    let mut labels = Vec::with_capacity(n);
    let mut ignore = Vec::with_capacity(n);
    for (p, &label) in gt_step.iter().enumerate() {
        if label > 0 {
            labels.push(label);
            ignore.push(false);
            continue;
        }
        let row = probs.row(p);
        let pred = argmax(row);
        let accepted = match medians.get(&pred) {
            Some(&m) => entropy(row) < m,
            None => false,
        };
        labels.push(if accepted { pred } else { 0 });
        ignore.push(!accepted);
    }
    Ok((labels, ignore))
}

/// Mean cross entropy of the current model against per-image label maps
/// over a batch, skipping ignored pixels.
pub fn loss_pl(
    model: &Model,
    images: &[&Tensor],
    labels: &[&[usize]],
    ignore: Option<&[&[bool]]>,
) -> Result<f64> {
    if images.len() != labels.len() {
        return Err(Error::input(
            "batch images and label maps differ".to_string(),
        ));
    }
    if let Some(masks) = ignore {
        if masks.len() != images.len() {
            return Err(Error::input("batch images and masks differ".to_string()));
        }
    }
    let mut feats = Vec::new();
    let mut labs = Vec::new();
    let mut mask = Vec::new();
    let d = model.input_dim();
    for (i, img) in images.iter().enumerate() {
        feats.extend_from_slice(img.data());
        labs.extend_from_slice(labels[i]);
        match ignore {
            Some(masks) => mask.extend_from_slice(masks[i]),
            None => mask.extend(std::iter::repeat_n(false, img.rows())),
        }
    }
    let features = Tensor::new(vec![labs.len(), d], feats)?;
    let fp = model.forward(&features)?;
    cross_entropy(&softmax(&fp.logits), &labs, Some(&mask))
}

/// Pooled population standard deviation of the embeddings of pixels
/// labeled with a class in `class_set`: each embedding component is
/// centered at its own mean and the squared deviations of all scalar
/// components are averaged together, so identical embeddings give 0.
pub fn feature_std(model: &Model, images: &[ImageSample], class_set: &[usize]) -> Result<f64> {
    let d = model.embed_dim();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for img in images {
        let fp = model.forward(&img.features)?;
        let emb = fp.embeddings();
        for (p, label) in img.gt_step.iter().enumerate() {
            if class_set.contains(label) {
                rows.push(emb.row(p).to_vec());
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::config("no labeled pixels for the requested classes"));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for row in &rows {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut sq = 0.0;
    for row in &rows {
        for (m, x) in mean.iter().zip(row) {
            sq += (x - m) * (x - m);
        }
    }
    Ok((sq / (n * d as f64)).sqrt())
}
