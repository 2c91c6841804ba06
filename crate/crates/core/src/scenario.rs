//! Synthetic multi-step segmentation scenarios.
//!
//! A scenario fixes Gaussian class means in feature space and paints
//! rectangle/ellipse regions onto small images. Foreground classes are
//! introduced step by step per `schedule`; each step's training labels
//! (`gt_step`) keep only that step's classes and collapse everything else
//! to background 0, while `gt_full` retains all classes. Regions painted
//! later occlude earlier ones; the region for the step's own class is
//! painted last so it always survives.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Total foreground classes across all steps; ids 1..=total_classes.
    pub total_classes: usize,
    /// Foreground classes introduced per step; sums to `total_classes`.
    pub schedule: Vec<usize>,
    pub images_per_step: usize,
    pub test_images: usize,
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    /// Distance of every foreground class mean from the origin.
    pub class_separation: f64,
    /// Per-component feature noise around the class mean.
    pub noise_sigma: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            total_classes: 6,
            schedule: vec![4, 1, 1],
            images_per_step: 24,
            test_images: 40,
            height: 16,
            width: 16,
            feature_dim: 8,
            class_separation: 4.0,
            noise_sigma: 0.8,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.total_classes == 0 {
            return Err(Error::config("total_classes must be at least 1"));
        }
        if self.total_classes > u16::MAX as usize - 1 {
            return Err(Error::config("total_classes exceeds label storage"));
        }
        if self.schedule.is_empty() {
            return Err(Error::config("schedule must have at least one step"));
        }
        if self.schedule.contains(&0) {
            return Err(Error::config("every schedule entry must be at least 1"));
        }
        let sum: usize = self.schedule.iter().sum();
        if sum != self.total_classes {
            return Err(Error::config(format!(
                "schedule sums to {sum} but total_classes is {}",
                self.total_classes
            )));
        }
        let max_new = *self.schedule.iter().max().expect("non-empty schedule");
        if self.images_per_step < max_new {
            return Err(Error::config(format!(
                "images_per_step {} cannot cover {} classes introduced in one step",
                self.images_per_step, max_new
            )));
        }
        if self.test_images < 5 {
            return Err(Error::config("test_images must be at least 5"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("image size must be at least 8x8"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be at least 1"));
        }
        if self.class_separation <= 0.0 || !self.class_separation.is_finite() {
            return Err(Error::config(
                "class_separation must be positive and finite",
            ));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::config("noise_sigma must be non-negative and finite"));
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.schedule.len()
    }

    /// Foreground class ids introduced at `step`, in increasing order.
    pub fn classes_introduced_at(&self, step: usize) -> Vec<usize> {
        let start: usize = 1 + self.schedule[..step].iter().sum::<usize>();
        (start..start + self.schedule[step]).collect()
    }

    /// Foreground class ids introduced strictly before `step`.
    pub fn classes_before(&self, step: usize) -> Vec<usize> {
        (1..=self.schedule[..step].iter().sum::<usize>()).collect()
    }

    /// Foreground class ids introduced at or before `step`.
    pub fn classes_through(&self, step: usize) -> Vec<usize> {
        (1..=self.schedule[..=step].iter().sum::<usize>()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// `[height, width, feature_dim]`
    pub features: Tensor,
    /// All foreground classes labeled, row-major.
    pub gt_full: Vec<usize>,
    /// Only the step's classes labeled; everything else is 0.
    pub gt_step: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSample {
    pub features: Tensor,
    pub gt_full: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDataset {
    pub step: usize,
    /// Foreground classes introduced at this step.
    pub class_set: Vec<usize>,
    pub images: Vec<ImageSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub seed: u64,
    /// Index 0 is the background mean (origin), then foreground means.
    pub class_means: Vec<Vec<f64>>,
    pub steps: Vec<StepDataset>,
    pub test_set: Vec<TestSample>,
}

/// Map labels for one step: classes in `class_set` stay, all else becomes 0.
pub fn relabel_for_step(gt_full: &[usize], class_set: &[usize]) -> Vec<usize> {
    gt_full
        .iter()
        .map(|&c| if class_set.contains(&c) { c } else { 0 })
        .collect()
}

#[derive(Clone, Copy)]
struct Region {
    class: usize,
    rect: bool,
    cx: f64,
    cy: f64,
    hx: f64,
    hy: f64,
}

impl Region {
    fn contains(&self, px: usize, py: usize) -> bool {
        let dx = px as f64 - self.cx;
        let dy = py as f64 - self.cy;
        if self.rect {
            dx.abs() <= self.hx && dy.abs() <= self.hy
        } else {
            (dx / self.hx).powi(2) + (dy / self.hy).powi(2) <= 1.0
        }
    }
}

fn draw_region<R: Rng>(spec: &ScenarioSpec, class: usize, rng: &mut R) -> Region {
    let max_half = 2f64.max(spec.height.min(spec.width) as f64 / 4.0);
    let rect = rng.random::<bool>();
    let hx = rng.random_range(2.0..=max_half);
    let hy = rng.random_range(2.0..=max_half);
    let cx = rng.random_range(hx..=(spec.width - 1) as f64 - hx);
    let cy = rng.random_range(hy..=(spec.height - 1) as f64 - hy);
    Region {
        class,
        rect,
        cx,
        cy,
        hx,
        hy,
    }
}

/// Paint regions in order (later regions occlude earlier ones), then sample
/// per-pixel features around the class means.
fn render<R: Rng>(
    spec: &ScenarioSpec,
    means: &[Vec<f64>],
    regions: &[Region],
    rng: &mut R,
) -> (Tensor, Vec<usize>) {
    let (h, w, d) = (spec.height, spec.width, spec.feature_dim);
    let mut gt = vec![0usize; h * w];
    for region in regions {
        for py in 0..h {
            for px in 0..w {
                if region.contains(px, py) {
                    gt[py * w + px] = region.class;
                }
            }
        }
    }
    let mut features = Tensor::zeros(vec![h, w, d]);
    let data = features.data_mut();
    for (p, &class) in gt.iter().enumerate() {
        let mean = &means[class];
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            data[p * d + j] = mean[j] + spec.noise_sigma * noise;
        }
    }
    (features, gt)
}

/// Training image for step `step`. The region of the designated current
/// class is painted last; optional regions may show old classes (not yet
/// distinguishable at this step) or future classes (not yet introduced).
fn synth_train_image<R: Rng>(
    spec: &ScenarioSpec,
    means: &[Vec<f64>],
    current_class: usize,
    old_pool: &[usize],
    future_pool: &[usize],
    current_pool: &[usize],
    rng: &mut R,
) -> (Tensor, Vec<usize>) {
    let n_regions = rng.random_range(2..=4usize);
    let mut optional = Vec::new();
    let mut slots = n_regions - 1;
    if !old_pool.is_empty() && rng.random::<bool>() && slots > 0 {
        optional.push(old_pool[rng.random_range(0..old_pool.len())]);
        slots -= 1;
    }
    if !future_pool.is_empty() && rng.random::<bool>() && slots > 0 {
        optional.push(future_pool[rng.random_range(0..future_pool.len())]);
        slots -= 1;
    }
    for _ in 0..slots {
        optional.push(current_pool[rng.random_range(0..current_pool.len())]);
    }
    let mut regions: Vec<Region> = optional
        .into_iter()
        .map(|c| draw_region(spec, c, rng))
        .collect();
    regions.push(draw_region(spec, current_class, rng));
    render(spec, means, &regions, rng)
}

fn synth_test_image<R: Rng>(spec: &ScenarioSpec, means: &[Vec<f64>], rng: &mut R) -> TestSample {
    let n_regions = rng.random_range(2..=4usize);
    let regions: Vec<Region> = (0..n_regions)
        .map(|_| {
            let class = rng.random_range(1..=spec.total_classes);
            draw_region(spec, class, rng)
        })
        .collect();
    let (features, gt_full) = render(spec, means, &regions, rng);
    TestSample { features, gt_full }
}

fn classes_in(gt: &[usize]) -> Vec<usize> {
    let mut seen: Vec<usize> = gt.iter().copied().filter(|&c| c > 0).collect();
    seen.sort_unstable();
    seen.dedup();
    seen
}

/// Every foreground class must appear in at least this many test images.
pub const TEST_IMAGES_PER_CLASS: usize = 5;

const MAX_REPAIR_ATTEMPTS: usize = 10_000;

/// Redraw test images until every foreground class appears in at least
/// [`TEST_IMAGES_PER_CLASS`] of them. Only images whose classes keep a
/// comfortable margin are replaced, so repaired coverage never regresses.
fn repair_test_coverage(
    spec: &ScenarioSpec,
    means: &[Vec<f64>],
    seed: u64,
    test_set: &mut [TestSample],
) -> Result<()> {
    let mut counts: BTreeMap<usize, usize> = (1..=spec.total_classes).map(|c| (c, 0)).collect();
    for sample in test_set.iter() {
        for c in classes_in(&sample.gt_full) {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    let mut attempt = 0usize;
    loop {
        let deficient = counts
            .iter()
            .find(|&(_, &n)| n < TEST_IMAGES_PER_CLASS)
            .map(|(&c, _)| c);
        let Some(target) = deficient else {
            return Ok(());
        };
        let slot = test_set.iter().position(|s| {
            classes_in(&s.gt_full)
                .iter()
                .all(|c| counts[c] > TEST_IMAGES_PER_CLASS)
        });
        let Some(slot) = slot else {
            return Err(Error::config(
                "test set too small to cover every class; increase test_images",
            ));
        };
        loop {
            attempt += 1;
            if attempt > MAX_REPAIR_ATTEMPTS {
                return Err(Error::config(
                    "could not satisfy test coverage; increase test_images",
                ));
            }
            let mut rng = stream(seed, "testfix", attempt as u64);
            let candidate = synth_test_image(spec, means, &mut rng);
            if classes_in(&candidate.gt_full).contains(&target) {
                for c in classes_in(&test_set[slot].gt_full) {
                    *counts.get_mut(&c).expect("counted class") -= 1;
                }
                for c in classes_in(&candidate.gt_full) {
                    *counts.get_mut(&c).expect("counted class") += 1;
                }
                test_set[slot] = candidate;
                break;
            }
        }
    }
}

pub fn generate(spec: &ScenarioSpec, seed: u64) -> Result<Scenario> {
    spec.validate()?;
    let d = spec.feature_dim;

    let mut means = vec![vec![0.0; d]];
    let mut mean_rng = stream(seed, "means", 0);
    for _ in 1..=spec.total_classes {
        loop {
            let v: Vec<f64> = (0..d)
                .map(|_| mean_rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                means.push(v.iter().map(|x| x / norm * spec.class_separation).collect());
                break;
            }
        }
    }

    let mut steps = Vec::with_capacity(spec.num_steps());
    for t in 0..spec.num_steps() {
        let class_set = spec.classes_introduced_at(t);
        let old_pool = spec.classes_before(t);
        let through: usize = spec.schedule[..=t].iter().sum();
        let future_pool: Vec<usize> = (through + 1..=spec.total_classes).collect();
        let mut images = Vec::with_capacity(spec.images_per_step);
        for i in 0..spec.images_per_step {
            let mut rng = stream(seed, "img", ((t as u64) << 32) | i as u64);
            let current = class_set[i % class_set.len()];
            let (features, gt_full) = synth_train_image(
                spec,
                &means,
                current,
                &old_pool,
                &future_pool,
                &class_set,
                &mut rng,
            );
            let gt_step = relabel_for_step(&gt_full, &class_set);
            images.push(ImageSample {
                features,
                gt_full,
                gt_step,
            });
        }
        steps.push(StepDataset {
            step: t,
            class_set,
            images,
        });
    }

    let mut test_set: Vec<TestSample> = (0..spec.test_images)
        .map(|i| {
            let mut rng = stream(seed, "test", i as u64);
            synth_test_image(spec, &means, &mut rng)
        })
        .collect();
    repair_test_coverage(spec, &means, seed, &mut test_set)?;

    Ok(Scenario {
        spec: spec.clone(),
        seed,
        class_means: means,
        steps,
        test_set,
    })
}
