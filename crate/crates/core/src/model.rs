//! Per-pixel classifier with explicit forward/backward passes and SGD.
//!
//! The model is an MLP feature extractor (ReLU hidden layers, identity
//! output producing the embedding) followed by a linear classifier head
//! whose output channel `k` is class id `k` (channel 0 = background).
//!
//! All trainable values live in one flat `f64` vector. The layout is
//! append-only: extractor layers first (weights then biases per layer),
//! then classifier rows in the order they were introduced, each row stored
//! as `[w_0 .. w_{D-1}, bias]`. Extending the classifier appends rows, so
//! indices of existing parameters never move and an older model's
//! parameter vector is always a prefix of its successors'.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Extractor architecture; the classifier head grows separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 8,
            hidden: vec![32, 32],
            embed_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ExtLayer {
    in_dim: usize,
    out_dim: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct ClfRow {
    off: usize,
    introduced_step: usize,
}

/// Named range of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub introduced_step: usize,
}

/// Flat, indexable snapshot of all trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub segments: Vec<Segment>,
}

impl ParamVector {
    /// Segments are disjoint, in order, and cover the whole vector.
    pub fn check_layout(&self) -> bool {
        let mut cursor = 0usize;
        for seg in &self.segments {
            if seg.start != cursor {
                return false;
            }
            cursor += seg.len;
        }
        cursor == self.values.len()
    }

    /// True when `self`'s layout is a prefix of `other`'s: every segment of
    /// `self` appears unchanged, at the same offset, in `other`.
    pub fn is_layout_prefix_of(&self, other: &ParamVector) -> bool {
        if self.values.len() > other.values.len() || self.segments.len() > other.segments.len() {
            return false;
        }
        self.segments
            .iter()
            .zip(&other.segments)
            .all(|(a, b)| a == b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    params: Vec<f64>,
    input_dim: usize,
    embed_dim: usize,
    ext: Vec<ExtLayer>,
    clf: Vec<ClfRow>,
}

/// Activations retained by [`Model::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `acts[0]` is the input; `acts[l + 1]` is layer `l`'s output.
    acts: Vec<Tensor>,
    /// Pre-activation of each extractor layer.
    preacts: Vec<Tensor>,
    pub logits: Tensor,
}

impl ForwardPass {
    pub fn embeddings(&self) -> &Tensor {
        self.acts.last().expect("forward pass has activations")
    }
}

impl Model {
    /// Fresh model with `initial_rows` classifier rows (1 + |C^0|), all
    /// tagged as introduced at step 0. Extractor weights are He-scaled
    /// Gaussian, classifier rows Gaussian with standard deviation 0.01,
    /// all biases zero.
    pub fn new<R: Rng>(arch: &Architecture, initial_rows: usize, rng: &mut R) -> Result<Self> {
        if arch.input_dim == 0 || arch.embed_dim == 0 || initial_rows == 0 {
            return Err(Error::config("architecture dimensions must be positive"));
        }
        let mut dims = Vec::with_capacity(arch.hidden.len() + 1);
        let mut prev = arch.input_dim;
        for &h in &arch.hidden {
            if h == 0 {
                return Err(Error::config("hidden layer width must be positive"));
            }
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, arch.embed_dim));

        let mut params = Vec::new();
        let mut ext = Vec::new();
        for (in_dim, out_dim) in dims {
            let w_off = params.len();
            let scale = (2.0 / in_dim as f64).sqrt();
            for _ in 0..in_dim * out_dim {
                let z: f64 = rng.sample(StandardNormal);
                params.push(z * scale);
            }
            let b_off = params.len();
            params.extend(std::iter::repeat_n(0.0, out_dim));
            ext.push(ExtLayer {
                in_dim,
                out_dim,
                w_off,
                b_off,
            });
        }

        let mut model = Self {
            params,
            input_dim: arch.input_dim,
            embed_dim: arch.embed_dim,
            ext,
            clf: Vec::new(),
        };
        model.push_rows(initial_rows, 0, rng);
        Ok(model)
    }

    fn push_rows<R: Rng>(&mut self, k: usize, step: usize, rng: &mut R) {
        for _ in 0..k {
            let off = self.params.len();
            for _ in 0..self.embed_dim {
                let z: f64 = rng.sample(StandardNormal);
                self.params.push(z * 0.01);
            }
            self.params.push(0.0);
            self.clf.push(ClfRow {
                off,
                introduced_step: step,
            });
        }
    }

    /// Rebuild a model from its architecture, the introduction step of
    /// each classifier row (in row order), and the flat parameter values.
    pub fn from_parts(arch: &Architecture, row_steps: &[usize], params: Vec<f64>) -> Result<Self> {
        if row_steps.is_empty() {
            return Err(Error::format("model needs at least one classifier row"));
        }
        if row_steps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::format("classifier rows out of introduction order"));
        }
        if arch.input_dim == 0 || arch.embed_dim == 0 || arch.hidden.contains(&0) {
            return Err(Error::format("architecture dimensions must be positive"));
        }
        let mut ext = Vec::with_capacity(arch.hidden.len() + 1);
        let mut len = 0;
        let mut prev = arch.input_dim;
        for &out_dim in arch.hidden.iter().chain(std::iter::once(&arch.embed_dim)) {
            ext.push(ExtLayer {
                in_dim: prev,
                out_dim,
                w_off: len,
                b_off: len + prev * out_dim,
            });
            len += prev * out_dim + out_dim;
            prev = out_dim;
        }
        let mut clf = Vec::with_capacity(row_steps.len());
        for &step in row_steps {
            clf.push(ClfRow {
                off: len,
                introduced_step: step,
            });
            len += arch.embed_dim + 1;
        }
        if params.len() != len {
            return Err(Error::format(format!(
                "parameter count {} does not match the declared layout ({len})",
                params.len()
            )));
        }
        Ok(Self {
            params,
            input_dim: arch.input_dim,
            embed_dim: arch.embed_dim,
            ext,
            clf,
        })
    }

    /// Extractor architecture (the classifier head is tracked separately).
    pub fn architecture(&self) -> Architecture {
        let hidden = self.ext[..self.ext.len() - 1]
            .iter()
            .map(|l| l.out_dim)
            .collect();
        Architecture {
            input_dim: self.input_dim,
            hidden,
            embed_dim: self.embed_dim,
        }
    }

    /// Introduction step of each classifier row, in row order.
    pub fn classifier_row_steps(&self) -> Vec<usize> {
        self.clf.iter().map(|r| r.introduced_step).collect()
    }

    /// Append `k_new` output rows for classes introduced at `step`.
    /// Existing parameters keep their indices and values.
    pub fn extend_classifier<R: Rng>(
        &mut self,
        k_new: usize,
        step: usize,
        rng: &mut R,
    ) -> Result<()> {
        if k_new == 0 {
            return Err(Error::config("classifier extension needs k_new >= 1"));
        }
        self.push_rows(k_new, step, rng);
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Classifier output width: 1 + foreground classes seen so far.
    pub fn output_width(&self) -> usize {
        self.clf.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::config(format!(
                "parameter length mismatch: model has {}, got {}",
                self.params.len(),
                values.len()
            )));
        }
        self.params.copy_from_slice(values);
        Ok(())
    }

    pub fn param_vector(&self) -> ParamVector {
        let mut segments = Vec::new();
        for (i, l) in self.ext.iter().enumerate() {
            segments.push(Segment {
                name: format!("ext{i}.w"),
                start: l.w_off,
                len: l.in_dim * l.out_dim,
                introduced_step: 0,
            });
            segments.push(Segment {
                name: format!("ext{i}.b"),
                start: l.b_off,
                len: l.out_dim,
                introduced_step: 0,
            });
        }
        // Classifier rows introduced at the same step form one segment.
        let mut i = 0;
        while i < self.clf.len() {
            let step = self.clf[i].introduced_step;
            let start = self.clf[i].off;
            let mut j = i;
            while j + 1 < self.clf.len() && self.clf[j + 1].introduced_step == step {
                j += 1;
            }
            let end = self.clf[j].off + self.embed_dim + 1;
            segments.push(Segment {
                name: format!("clf.step{step}"),
                start,
                len: end - start,
                introduced_step: step,
            });
            i = j + 1;
        }
        ParamVector {
            values: self.params.clone(),
            segments,
        }
    }

    /// Index ranges of extractor parameters (used to assert that prototype
    /// replay leaves the extractor untouched).
    pub fn extractor_param_range(&self) -> std::ops::Range<usize> {
        match self.clf.first() {
            Some(row) => 0..row.off,
            None => 0..self.params.len(),
        }
    }

    pub fn classifier_rows_introduced_at(&self, step: usize) -> Vec<usize> {
        self.clf
            .iter()
            .enumerate()
            .filter(|(_, r)| r.introduced_step == step)
            .map(|(k, _)| k)
            .collect()
    }

    /// Forward pass over `features` shaped `[N, input_dim]` (any leading
    /// shape whose last axis is `input_dim`).
    pub fn forward(&self, features: &Tensor) -> Result<ForwardPass> {
        if features.cols() != self.input_dim {
            return Err(Error::config(format!(
                "input feature dim {} does not match model input dim {}",
                features.cols(),
                self.input_dim
            )));
        }
        let n = features.rows();
        if n == 0 {
            return Err(Error::config("forward needs at least one pixel"));
        }
        let input = Tensor::new(vec![n, self.input_dim], features.data().to_vec())
            .expect("input shape consistent");

        let mut acts = vec![input];
        let mut preacts = Vec::with_capacity(self.ext.len());
        let last = self.ext.len() - 1;
        for (l, layer) in self.ext.iter().enumerate() {
            let prev = &acts[l];
            let mut z = Tensor::zeros(vec![n, layer.out_dim]);
            for r in 0..n {
                let x = prev.row(r);
                let zr = z.row_mut(r);
                for (o, out) in zr.iter_mut().enumerate() {
                    let w = &self.params
                        [layer.w_off + o * layer.in_dim..layer.w_off + (o + 1) * layer.in_dim];
                    let mut acc = self.params[layer.b_off + o];
                    for (wi, xi) in w.iter().zip(x) {
                        acc += wi * xi;
                    }
                    *out = acc;
                }
            }
            let a = if l == last {
                z.clone()
            } else {
                let mut a = z.clone();
                for v in a.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                a
            };
            preacts.push(z);
            acts.push(a);
        }

        let emb = acts.last().expect("extractor produced embeddings");
        let k = self.clf.len();
        let mut logits = Tensor::zeros(vec![n, k]);
        for r in 0..n {
            let e = emb.row(r);
            let out = logits.row_mut(r);
            for (c, row) in self.clf.iter().enumerate() {
                out[c] = self.row_logit(row, e);
            }
        }
        Ok(ForwardPass {
            acts,
            preacts,
            logits,
        })
    }

    fn row_logit(&self, row: &ClfRow, emb: &[f64]) -> f64 {
        let w = &self.params[row.off..row.off + self.embed_dim];
        let mut acc = self.params[row.off + self.embed_dim];
        for (wi, ei) in w.iter().zip(emb) {
            acc += wi * ei;
        }
        acc
    }

    /// Classifier head applied to a raw embedding vector (prototypes never
    /// pass through the extractor).
    pub fn classifier_logits(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.embed_dim {
            return Err(Error::config(format!(
                "embedding dim {} does not match model embed dim {}",
                embedding.len(),
                self.embed_dim
            )));
        }
        Ok(self
            .clf
            .iter()
            .map(|row| self.row_logit(row, embedding))
            .collect())
    }

    /// Pixel-mean cross entropy of `softmax(logits)` against `labels`,
    /// accumulating d(loss)/d(params) into `grad`. Ignored pixels
    /// contribute neither to the mean nor to the gradient.
    pub fn backward_ce(
        &self,
        fp: &ForwardPass,
        labels: &[usize],
        ignore: Option<&[bool]>,
        grad: &mut [f64],
    ) -> Result<f64> {
        let n = fp.logits.rows();
        let k = fp.logits.cols();
        if labels.len() != n {
            return Err(Error::input(format!(
                "{} labels for {} pixels",
                labels.len(),
                n
            )));
        }
        if grad.len() != self.params.len() {
            return Err(Error::config("gradient buffer length mismatch"));
        }
        let valid = |i: usize| ignore.is_none_or(|m| !m[i]);
        let m = (0..n).filter(|&i| valid(i)).count();
        if m == 0 {
            return Ok(0.0);
        }

        let probs = softmax(&fp.logits);
        let loss = cross_entropy(&probs, labels, ignore)?;

        // d(loss)/d(logits), zero on ignored pixels.
        let mut dlogits = Tensor::zeros(vec![n, k]);
        let scale = 1.0 / m as f64;
        for i in 0..n {
            if !valid(i) {
                continue;
            }
            let p = probs.row(i);
            let d = dlogits.row_mut(i);
            for c in 0..k {
                d[c] = p[c] * scale;
            }
            d[labels[i]] -= scale;
        }

        // Classifier rows and gradient into the embedding.
        let emb = fp.embeddings();
        let d_emb_dim = self.embed_dim;
        let mut demb = Tensor::zeros(vec![n, d_emb_dim]);
        for i in 0..n {
            let d = dlogits.row(i);
            let e = emb.row(i);
            let de = demb.row_mut(i);
            for (c, row) in self.clf.iter().enumerate() {
                let g = d[c];
                if g == 0.0 {
                    continue;
                }
                for j in 0..d_emb_dim {
                    grad[row.off + j] += g * e[j];
                    de[j] += g * self.params[row.off + j];
                }
                grad[row.off + d_emb_dim] += g;
            }
        }

        // Extractor layers, last to first.
        let last = self.ext.len() - 1;
        let mut da = demb;
        for l in (0..self.ext.len()).rev() {
            let layer = &self.ext[l];
            let z = &fp.preacts[l];
            let a_in = &fp.acts[l];
            let mut da_prev = Tensor::zeros(vec![n, layer.in_dim]);
            for i in 0..n {
                let zr = z.row(i);
                let dar = da.row(i);
                let xin = a_in.row(i);
                let dprev = da_prev.row_mut(i);
                for o in 0..layer.out_dim {
                    let mut g = dar[o];
                    if l != last && zr[o] <= 0.0 {
                        g = 0.0;
                    }
                    if g == 0.0 {
                        continue;
                    }
                    let w_row = layer.w_off + o * layer.in_dim;
                    for j in 0..layer.in_dim {
                        grad[w_row + j] += g * xin[j];
                        dprev[j] += g * self.params[w_row + j];
                    }
                    grad[layer.b_off + o] += g;
                }
            }
            da = da_prev;
        }
        Ok(loss)
    }

    /// Cross entropy of the classifier head on a detached embedding against
    /// weighted targets `(class, weight)`; gradients (scaled by
    /// `grad_scale`) accumulate into classifier parameters only.
    pub fn classifier_weighted_ce(
        &self,
        embedding: &[f64],
        targets: &[(usize, f64)],
        grad_scale: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        let logits = self.classifier_logits(embedding)?;
        let k = logits.len();
        let probs_t = softmax(&Tensor::new(vec![1, k], logits)?);
        let probs = probs_t.row(0);
        let mut loss = 0.0;
        for &(target, weight) in targets {
            if target >= k {
                return Err(Error::input(format!(
                    "target class {target} out of range for {k} channels"
                )));
            }
            loss += weight * -(probs[target].ln());
        }
        if let Some(grad) = grad {
            let wsum: f64 = targets.iter().map(|&(_, w)| w).sum();
            for (c, row) in self.clf.iter().enumerate() {
                let mut g = wsum * probs[c];
                for &(target, weight) in targets {
                    if target == c {
                        g -= weight;
                    }
                }
                let g = g * grad_scale;
                if g == 0.0 {
                    continue;
                }
                for j in 0..self.embed_dim {
                    grad[row.off + j] += g * embedding[j];
                }
                grad[row.off + self.embed_dim] += g;
            }
        }
        Ok(loss)
    }

    /// Plain SGD: `params <- params - lr * grad`.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.params.len() {
            return Err(Error::config("gradient buffer length mismatch"));
        }
        if lr < 0.0 {
            return Err(Error::config("learning rate must be non-negative"));
        }
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
        Ok(())
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let n = logits.rows();
    let k = logits.cols();
    let mut out = Tensor::zeros(vec![n, k]);
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(r);
        let mut sum = 0.0;
        for c in 0..k {
            let e = (row[c] - max).exp();
            o[c] = e;
            sum += e;
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean of `-ln p[i, label_i]` over non-ignored pixels; 0 when every pixel
/// is ignored.
pub fn cross_entropy(probs: &Tensor, labels: &[usize], ignore: Option<&[bool]>) -> Result<f64> {
    let n = probs.rows();
    let k = probs.cols();
    if labels.len() != n {
        return Err(Error::input(format!(
            "{} labels for {} pixels",
            labels.len(),
            n
        )));
    }
    if let Some(mask) = ignore {
        if mask.len() != n {
            return Err(Error::input("ignore mask length mismatch".to_string()));
        }
    }
    let mut sum = 0.0;
    let mut m = 0usize;
    for i in 0..n {
        if let Some(mask) = ignore {
            if mask[i] {
                continue;
            }
        }
        if labels[i] >= k {
            return Err(Error::input(format!(
                "label {} out of range for {} channels",
                labels[i], k
            )));
        }
        sum += -(probs.row(i)[labels[i]].ln());
        m += 1;
    }
    if m == 0 {
        return Ok(0.0);
    }
    Ok(sum / m as f64)
}

/// Index of the first maximum of a row.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
