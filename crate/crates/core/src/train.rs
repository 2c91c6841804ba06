//! Incremental training orchestration and the method/ablation matrix.
//!
//! Each step sees only its own dataset. From step 1 on, the previous model
//! is frozen: it supplies pseudo labels for collapsed background pixels,
//! its prototypes drive replay of old classifier rows, and after the
//! step's epochs its parameters can be fused back into the trained model,
//! either uniformly or selectively by importance. Every stochastic concern
//! (init, shuffling, self/inter replay draws) owns a named rng stream
//! derived from the run seed and step index, so disabling one mechanism
//! never shifts another's draws and a run can resume from any step
//! bit-exactly.

use serde::{Deserialize, Serialize};

use crate::augment::{loss_pa, scaling_factor};
use crate::consolidate::{
    beta, fisher_diagonal, merge_above_threshold, omega, selective_merge, uniform_fusion,
    FisherDiag,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, StepMetrics};
use crate::model::{Architecture, Model};
use crate::proto::{
    entropy_medians, median_entropy_pseudo_labels, naive_pseudo_labels, pseudo_labels,
    PrototypeStore,
};
use crate::rng::stream;
use crate::scenario::{generate, ImageSample, Scenario, ScenarioSpec, StepDataset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelStrategy {
    /// Collapsed pixels stay background.
    None,
    /// Frozen-model argmax.
    Naive,
    /// Frozen-model argmax gated by per-class median entropy.
    MedianEntropy,
    /// Frozen-model probabilities reweighted by prototype proximity.
    PrototypeGuided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consolidation {
    None,
    /// Every old parameter interpolates toward its old value.
    Uniform,
    /// Only parameters above the importance threshold interpolate.
    Selective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub struct MethodConfig {
    pub pseudo_labels: PseudoLabelStrategy,
    pub use_self_augment: bool,
    pub use_inter_augment: bool,
    pub consolidation: Consolidation,
    /// Train once on the union of all steps with full labels (upper bound).
    pub joint_training: bool,
}

impl MethodConfig {
    /// Plain sequential fine-tuning: no mechanism at all (lower bound).
    pub fn ft() -> Self {
        Self {
            pseudo_labels: PseudoLabelStrategy::None,
            use_self_augment: false,
            use_inter_augment: false,
            consolidation: Consolidation::None,
            joint_training: false,
        }
    }

    /// Offline training on all data at once (upper bound).
    pub fn joint() -> Self {
        Self {
            joint_training: true,
            ..Self::ft()
        }
    }

    /// Pseudo labels from the frozen model's argmax only.
    pub fn naive_pl() -> Self {
        Self {
            pseudo_labels: PseudoLabelStrategy::Naive,
            ..Self::ft()
        }
    }

    /// Pseudo labels gated by median entropy.
    pub fn median_pl() -> Self {
        Self {
            pseudo_labels: PseudoLabelStrategy::MedianEntropy,
            ..Self::ft()
        }
    }

    /// Uniform weight fusion only.
    pub fn wf() -> Self {
        Self {
            consolidation: Consolidation::Uniform,
            ..Self::ft()
        }
    }

    /// The full method: prototype-guided pseudo labels, self and inter
    /// prototype replay, selective consolidation.
    pub fn cs2k() -> Self {
        Self {
            pseudo_labels: PseudoLabelStrategy::PrototypeGuided,
            use_self_augment: true,
            use_inter_augment: true,
            consolidation: Consolidation::Selective,
            joint_training: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.joint_training
            && (self.pseudo_labels != PseudoLabelStrategy::None
                || self.use_self_augment
                || self.use_inter_augment
                || self.consolidation != Consolidation::None)
        {
            return Err(Error::config(
                "joint training excludes every incremental mechanism",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Prototype-guided pseudo labels degrade to the naive argmax
    /// (uniform similarity makes the two rules identical).
    Ppl,
    /// Drop the self-jitter replay term.
    PcaSa,
    /// Drop the mixture replay term.
    PcaIa,
    /// Drop consolidation entirely.
    Wsc,
}

impl MethodConfig {
    /// Remove one mechanism from the full method.
    pub fn ablate(mut self, which: Ablation) -> Self {
        match which {
            Ablation::Ppl => self.pseudo_labels = PseudoLabelStrategy::Naive,
            Ablation::PcaSa => self.use_self_augment = false,
            Ablation::PcaIa => self.use_inter_augment = false,
            Ablation::Wsc => self.consolidation = Consolidation::None,
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Override the epoch count for step 0 only.
    pub first_step_epochs: Option<usize>,
    /// Images per SGD batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Temperature of the prototype-similarity softmax.
    pub tau: f64,
    /// Count background in the "old" metric group from step 1 onward.
    pub bg_in_old_group: bool,
    /// Debug knob: replace the count-scheduled interpolation weight.
    pub omega_override: Option<f64>,
    /// Debug knob: merge every old parameter regardless of importance.
    pub select_all_merge: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            first_step_epochs: None,
            batch_size: 8,
            learning_rate: 0.05,
            hidden: vec![32, 32],
            embed_dim: 16,
            tau: 1.0,
            bg_in_old_group: true,
            omega_override: None,
            select_all_merge: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.first_step_epochs == Some(0) {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be positive and finite"));
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::config("tau must be positive and finite"));
        }
        if let Some(w) = self.omega_override {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::config("omega override outside [0,1]"));
            }
        }
        Ok(())
    }

    fn epochs_for(&self, step: usize) -> usize {
        if step == 0 {
            self.first_step_epochs.unwrap_or(self.epochs)
        } else {
            self.epochs
        }
    }
}

/// Mutable state carried across steps of one run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub model: Model,
    /// Frozen snapshot taken before the classifier was extended for the
    /// most recent step; `None` before step 1 runs.
    pub old_model: Option<Model>,
    pub store: PrototypeStore,
    /// Importance of the previous step's parameters on its own data.
    pub fisher: Option<FisherDiag>,
    /// Next step to train.
    pub step: usize,
    pub seed: u64,
}

impl RunState {
    pub fn new(sc: &Scenario, hyper: &TrainingConfig, seed: u64) -> Result<Self> {
        let arch = Architecture {
            input_dim: sc.spec.feature_dim,
            hidden: hyper.hidden.clone(),
            embed_dim: hyper.embed_dim,
        };
        let mut rng = stream(seed, "init", 0);
        let model = Model::new(&arch, 1 + sc.spec.schedule[0], &mut rng)?;
        Ok(Self {
            model,
            old_model: None,
            store: PrototypeStore::new(),
            fisher: None,
            step: 0,
            seed,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    /// One report per executed step, in step order.
    pub reports: Vec<StepMetrics>,
    /// State snapshot after each executed step (for checkpointing).
    pub snapshots: Vec<RunState>,
}

fn concat_batch(
    images: &[&ImageSample],
    labels: Vec<Vec<usize>>,
    ignores: Option<Vec<Vec<bool>>>,
    input_dim: usize,
) -> Result<(Tensor, Vec<usize>, Option<Vec<bool>>)> {
    let mut feats = Vec::new();
    let mut labs = Vec::new();
    for (img, l) in images.iter().zip(labels) {
        feats.extend_from_slice(img.features.data());
        labs.extend(l);
    }
    let ignore = ignores.map(|masks| masks.into_iter().flatten().collect());
    let features = Tensor::new(vec![labs.len(), input_dim], feats)?;
    Ok((features, labs, ignore))
}

struct StepContext<'a> {
    old_model: Option<&'a Model>,
    medians: Option<std::collections::BTreeMap<usize, f64>>,
}

fn batch_labels(
    method: &MethodConfig,
    ctx: &StepContext,
    store: &PrototypeStore,
    tau: f64,
    img: &ImageSample,
) -> Result<(Vec<usize>, Option<Vec<bool>>)> {
    let Some(old) = ctx.old_model else {
        return Ok((img.gt_step.clone(), None));
    };
    match method.pseudo_labels {
        PseudoLabelStrategy::None => Ok((img.gt_step.clone(), None)),
        PseudoLabelStrategy::Naive => {
            Ok((naive_pseudo_labels(&img.features, &img.gt_step, old)?, None))
        }
        PseudoLabelStrategy::MedianEntropy => {
            let medians = ctx
                .medians
                .as_ref()
                .expect("medians computed for the median-entropy strategy");
            let (labels, ignore) =
                median_entropy_pseudo_labels(&img.features, &img.gt_step, old, medians)?;
            Ok((labels, Some(ignore)))
        }
        PseudoLabelStrategy::PrototypeGuided => Ok((
            pseudo_labels(&img.features, &img.gt_step, old, store, tau)?,
            None,
        )),
    }
}

/// One full training step: epochs of SGD on the combined loss, then the
/// configured consolidation, then bookkeeping (prototypes, spread, and
/// importance of the final model on this step's data).
///
/// The classifier must already be extended for this step's classes and
/// `state.old_model`/`state.store` prepared (see [`prepare_step`]).
pub fn train_step(
    state: &mut RunState,
    data: &StepDataset,
    method: &MethodConfig,
    hyper: &TrainingConfig,
) -> Result<()> {
    let t = state.step;
    let replay_on = t > 0 && (method.use_self_augment || method.use_inter_augment);
    let s_t = if replay_on {
        scaling_factor(t, &state.store)?
    } else {
        0.0
    };
    let mut shuffle_rng = stream(state.seed, "shuffle", t as u64);
    let mut rng_self = stream(state.seed, "selfaug", t as u64);
    let mut rng_inter = stream(state.seed, "interaug", t as u64);

    let mut order: Vec<usize> = (0..data.images.len()).collect();
    let mut grad = vec![0.0; state.model.num_params()];

    for _epoch in 0..hyper.epochs_for(t) {
        let ctx = StepContext {
            old_model: state.old_model.as_ref(),
            medians: match (method.pseudo_labels, state.old_model.as_ref()) {
                (PseudoLabelStrategy::MedianEntropy, Some(old)) => {
                    Some(entropy_medians(old, data)?)
                }
                _ => None,
            },
        };
        shuffle(&mut order, &mut shuffle_rng);
        for chunk in order.chunks(hyper.batch_size) {
            let images: Vec<&ImageSample> = chunk.iter().map(|&i| &data.images[i]).collect();
            let mut labels = Vec::with_capacity(images.len());
            let mut ignores: Option<Vec<Vec<bool>>> = None;
            for img in &images {
                let (l, ig) = batch_labels(method, &ctx, &state.store, hyper.tau, img)?;
                labels.push(l);
                if let Some(ig) = ig {
                    ignores.get_or_insert_with(Vec::new).push(ig);
                }
            }
            let (features, labs, ignore) =
                concat_batch(&images, labels, ignores, state.model.input_dim())?;

            grad.iter_mut().for_each(|g| *g = 0.0);
            let fp = state.model.forward(&features)?;
            state
                .model
                .backward_ce(&fp, &labs, ignore.as_deref(), &mut grad)?;
            if replay_on {
                loss_pa(
                    &state.model,
                    &state.store,
                    s_t,
                    method.use_self_augment,
                    method.use_inter_augment,
                    &mut rng_self,
                    &mut rng_inter,
                    Some(&mut grad),
                )?;
            }
            state.model.sgd_step(&grad, hyper.learning_rate)?;
        }
    }

    if t > 0 && method.consolidation != Consolidation::None {
        let old = state
            .old_model
            .as_ref()
            .ok_or_else(|| Error::config("consolidation needs the previous model"))?;
        let mut counts: Vec<usize> = (0..t)
            .map(|m| {
                state
                    .store
                    .class_counts
                    .get(&m)
                    .copied()
                    .ok_or_else(|| Error::config(format!("missing class count for step {m}")))
            })
            .collect::<Result<_>>()?;
        counts.push(data.class_set.len());
        let w = match hyper.omega_override {
            Some(w) => w,
            None => omega(&counts)?,
        };
        let theta_old = old.param_vector();
        let theta_new = state.model.param_vector();
        let merged = match method.consolidation {
            Consolidation::Uniform => uniform_fusion(&theta_old, &theta_new, w)?,
            Consolidation::Selective => {
                let fisher = state.fisher.as_ref().ok_or_else(|| {
                    Error::config("selective consolidation needs previous-step importance")
                })?;
                if hyper.select_all_merge {
                    merge_above_threshold(&theta_old, &theta_new, fisher, -1.0, w)?
                } else {
                    selective_merge(&theta_old, &theta_new, fisher, beta(&counts)?, w)?
                }
            }
            Consolidation::None => unreachable!(),
        };
        state.model.set_params(&merged.values)?;
    }

    state.store.record_step(&state.model, data)?;
    state.fisher = Some(fisher_diagonal(&state.model, data)?);
    state.step = t + 1;
    Ok(())
}

fn shuffle<R: rand::Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Freeze the previous model, extend the classifier for this step's
/// classes, and refresh the background prototype from this step's data.
/// A no-op at step 0 (the initial model already covers step 0).
pub fn prepare_step(state: &mut RunState, data: &StepDataset) -> Result<()> {
    let t = state.step;
    if data.step != t {
        return Err(Error::config(format!(
            "dataset is for step {} but the run is at step {t}",
            data.step
        )));
    }
    if t == 0 {
        return Ok(());
    }
    let old = state.model.clone();
    let mut init_rng = stream(state.seed, "init", t as u64);
    state
        .model
        .extend_classifier(data.class_set.len(), t, &mut init_rng)?;
    state.store.update_background(&old, data)?;
    state.old_model = Some(old);
    Ok(())
}

/// Execute the remaining steps of `state` on `sc`, reporting on the full
/// test set after each step.
pub fn run_steps_from(
    sc: &Scenario,
    method: &MethodConfig,
    hyper: &TrainingConfig,
    mut state: RunState,
) -> Result<RunOutput> {
    method.validate()?;
    hyper.validate()?;
    if method.joint_training {
        return Err(Error::config("joint training does not run stepwise"));
    }
    let mut out = RunOutput::default();
    for t in state.step..sc.spec.num_steps() {
        let data = &sc.steps[t];
        prepare_step(&mut state, data)?;
        train_step(&mut state, data, method, hyper)?;
        out.reports.push(evaluate_model(
            &state.model,
            &sc.test_set,
            &sc.spec,
            t,
            hyper.bg_in_old_group,
        )?);
        out.snapshots.push(state.clone());
    }
    Ok(out)
}

fn run_joint(sc: &Scenario, hyper: &TrainingConfig, seed: u64) -> Result<RunOutput> {
    let arch = Architecture {
        input_dim: sc.spec.feature_dim,
        hidden: hyper.hidden.clone(),
        embed_dim: hyper.embed_dim,
    };
    let mut init_rng = stream(seed, "init", 0);
    let mut model = Model::new(&arch, 1 + sc.spec.total_classes, &mut init_rng)?;

    let images: Vec<&ImageSample> = sc.steps.iter().flat_map(|s| &s.images).collect();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut shuffle_rng = stream(seed, "shuffle", 0);
    let mut grad = vec![0.0; model.num_params()];
    for _epoch in 0..hyper.epochs {
        shuffle(&mut order, &mut shuffle_rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| images[i]).collect();
            let labels: Vec<Vec<usize>> = batch.iter().map(|img| img.gt_full.clone()).collect();
            let (features, labs, _) = concat_batch(&batch, labels, None, model.input_dim())?;
            grad.iter_mut().for_each(|g| *g = 0.0);
            let fp = model.forward(&features)?;
            model.backward_ce(&fp, &labs, None, &mut grad)?;
            model.sgd_step(&grad, hyper.learning_rate)?;
        }
    }

    let mut out = RunOutput::default();
    for t in 0..sc.spec.num_steps() {
        out.reports.push(evaluate_model(
            &model,
            &sc.test_set,
            &sc.spec,
            t,
            hyper.bg_in_old_group,
        )?);
        out.snapshots.push(RunState {
            model: model.clone(),
            old_model: None,
            store: PrototypeStore::new(),
            fisher: None,
            step: t + 1,
            seed,
        });
    }
    Ok(out)
}

/// Run a full method on a scenario from scratch.
pub fn run_on_scenario(
    sc: &Scenario,
    method: &MethodConfig,
    hyper: &TrainingConfig,
    seed: u64,
) -> Result<RunOutput> {
    method.validate()?;
    hyper.validate()?;
    if method.joint_training {
        return run_joint(sc, hyper, seed);
    }
    let state = RunState::new(sc, hyper, seed)?;
    run_steps_from(sc, method, hyper, state)
}

/// Generate the scenario for `spec` with `seed` and run on it directly.
pub fn run_scenario(
    spec: &ScenarioSpec,
    method: &MethodConfig,
    hyper: &TrainingConfig,
    seed: u64,
) -> Result<RunOutput> {
    let sc = generate(spec, seed)?;
    run_on_scenario(&sc, method, hyper, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::cross_entropy;
    use crate::model::softmax;

    fn tiny_spec(steps: &[usize]) -> ScenarioSpec {
        ScenarioSpec {
            total_classes: steps.iter().sum(),
            schedule: steps.to_vec(),
            images_per_step: 6,
            test_images: 15,
            height: 10,
            width: 10,
            feature_dim: 5,
            class_separation: 3.5,
            noise_sigma: 0.5,
        }
    }

    fn tiny_hyper() -> TrainingConfig {
        TrainingConfig {
            epochs: 4,
            batch_size: 3,
            learning_rate: 0.05,
            hidden: vec![12],
            embed_dim: 6,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn joint_rejects_extra_mechanisms() {
        let mut m = MethodConfig::joint();
        m.use_self_augment = true;
        assert!(matches!(m.validate().unwrap_err(), Error::Config(_)));
        assert!(MethodConfig::joint().validate().is_ok());
    }

    #[test]
    fn ablations_toggle_exactly_one_mechanism() {
        let full = MethodConfig::cs2k();
        let a = full.ablate(Ablation::Ppl);
        assert_eq!(a.pseudo_labels, PseudoLabelStrategy::Naive);
        assert_eq!(a.consolidation, Consolidation::Selective);
        let a = full.ablate(Ablation::PcaSa);
        assert!(!a.use_self_augment && a.use_inter_augment);
        let a = full.ablate(Ablation::PcaIa);
        assert!(a.use_self_augment && !a.use_inter_augment);
        let a = full.ablate(Ablation::Wsc);
        assert_eq!(a.consolidation, Consolidation::None);
        assert_eq!(a.pseudo_labels, PseudoLabelStrategy::PrototypeGuided);
    }

    #[test]
    fn first_step_is_plain_supervised_training_for_every_method() {
        let sc = generate(&tiny_spec(&[2]), 3).unwrap();
        let hyper = tiny_hyper();
        let ft = run_on_scenario(&sc, &MethodConfig::ft(), &hyper, 11).unwrap();
        let full = run_on_scenario(&sc, &MethodConfig::cs2k(), &hyper, 11).unwrap();
        assert_eq!(
            ft.snapshots[0].model.params(),
            full.snapshots[0].model.params()
        );
    }

    #[test]
    fn single_step_run_matches_a_hand_written_ce_loop() {
        let sc = generate(&tiny_spec(&[2]), 5).unwrap();
        let hyper = tiny_hyper();
        let seed = 21;
        let got = run_on_scenario(&sc, &MethodConfig::naive_pl(), &hyper, seed).unwrap();

        // Oracle: identical init, shuffle, batching, plain CE SGD.
        let mut model = {
            let arch = Architecture {
                input_dim: 5,
                hidden: vec![12],
                embed_dim: 6,
            };
            let mut rng = stream(seed, "init", 0);
            Model::new(&arch, 3, &mut rng).unwrap()
        };
        let data = &sc.steps[0];
        let mut order: Vec<usize> = (0..data.images.len()).collect();
        let mut shuffle_rng = stream(seed, "shuffle", 0);
        let mut grad = vec![0.0; model.num_params()];
        for _ in 0..hyper.epochs {
            shuffle(&mut order, &mut shuffle_rng);
            for chunk in order.chunks(hyper.batch_size) {
                let images: Vec<&ImageSample> = chunk.iter().map(|&i| &data.images[i]).collect();
                let labels: Vec<Vec<usize>> =
                    images.iter().map(|img| img.gt_step.clone()).collect();
                let (features, labs, _) = concat_batch(&images, labels, None, 5).unwrap();
                grad.iter_mut().for_each(|g| *g = 0.0);
                let fp = model.forward(&features).unwrap();
                model.backward_ce(&fp, &labs, None, &mut grad).unwrap();
                model.sgd_step(&grad, hyper.learning_rate).unwrap();
            }
        }
        assert_eq!(got.snapshots[0].model.params(), model.params());
    }

    #[test]
    fn same_seed_gives_bit_identical_reports() {
        let sc = generate(&tiny_spec(&[2, 1]), 7).unwrap();
        let hyper = tiny_hyper();
        let a = run_on_scenario(&sc, &MethodConfig::cs2k(), &hyper, 9).unwrap();
        let b = run_on_scenario(&sc, &MethodConfig::cs2k(), &hyper, 9).unwrap();
        assert_eq!(a.reports, b.reports);
        for (x, y) in a.snapshots.iter().zip(&b.snapshots) {
            assert_eq!(x.model.params(), y.model.params());
        }
        let c = run_on_scenario(&sc, &MethodConfig::cs2k(), &hyper, 10).unwrap();
        assert_ne!(
            a.snapshots.last().unwrap().model.params(),
            c.snapshots.last().unwrap().model.params()
        );
    }

    #[test]
    fn old_model_is_frozen_through_its_step() {
        let sc = generate(&tiny_spec(&[2, 1]), 13).unwrap();
        let hyper = tiny_hyper();
        let out = run_on_scenario(&sc, &MethodConfig::cs2k(), &hyper, 14).unwrap();
        let step0 = out.snapshots[0].model.params();
        let frozen = out.snapshots[1]
            .old_model
            .as_ref()
            .expect("frozen model kept during step 1");
        assert_eq!(frozen.params(), step0);
    }

    #[test]
    fn omega_one_with_everything_selected_restores_old_parameters() {
        let sc = generate(&tiny_spec(&[2, 1]), 15).unwrap();
        let hyper = TrainingConfig {
            omega_override: Some(1.0),
            select_all_merge: true,
            ..tiny_hyper()
        };
        let out = run_on_scenario(&sc, &MethodConfig::cs2k(), &hyper, 16).unwrap();
        let before = out.snapshots[0].model.params();
        let after = out.snapshots[1].model.params();
        assert_eq!(&after[..before.len()], before);
    }

    #[test]
    fn consolidation_commutes_with_running_it_separately() {
        // Training with selective consolidation equals training without it
        // and applying the merge afterwards: the merge is strictly
        // post-epoch and shares no rng with training.
        let sc = generate(&tiny_spec(&[2, 1]), 17).unwrap();
        let hyper = tiny_hyper();
        let seed = 18;
        let with = run_on_scenario(&sc, &MethodConfig::cs2k(), &hyper, seed).unwrap();
        let without = run_on_scenario(
            &sc,
            &MethodConfig::cs2k().ablate(Ablation::Wsc),
            &hyper,
            seed,
        )
        .unwrap();

        let theta_old = without.snapshots[0].model.param_vector();
        // The unmerged step-1 parameters are not what the with-merge run
        // stored (it stored post-merge), so recompute the merge from the
        // ablated run's artifacts.
        let theta_new = without.snapshots[1].model.param_vector();
        let fisher = without.snapshots[0].fisher.as_ref().unwrap();
        let counts = vec![2usize, 1];
        let merged = selective_merge(
            &theta_old,
            &theta_new,
            fisher,
            beta(&counts).unwrap(),
            omega(&counts).unwrap(),
        )
        .unwrap();
        assert_eq!(with.snapshots[1].model.params(), &merged.values[..]);
    }

    #[test]
    fn joint_with_zero_noise_separable_means_is_perfect() {
        let mut spec = tiny_spec(&[2, 1]);
        spec.noise_sigma = 0.0;
        let sc = generate(&spec, 19).unwrap();
        let hyper = TrainingConfig {
            epochs: 60,
            ..tiny_hyper()
        };
        let out = run_on_scenario(&sc, &MethodConfig::joint(), &hyper, 20).unwrap();
        let last = out.reports.last().unwrap();
        assert_eq!(
            last.miou_all,
            Some(1.0),
            "per-class: {:?}",
            last.per_class_iou
        );

        // Nearest-mean oracle: distinct means make classes separable.
        for a in 0..sc.class_means.len() {
            for b in a + 1..sc.class_means.len() {
                let d: f64 = sc.class_means[a]
                    .iter()
                    .zip(&sc.class_means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                assert!(d.sqrt() > 1.0, "means {a} and {b} too close");
            }
        }
    }

    #[test]
    fn resume_from_checkpoint_state_matches_the_full_run() {
        let sc = generate(&tiny_spec(&[2, 1, 1]), 23).unwrap();
        let hyper = tiny_hyper();
        let seed = 24;
        let full = run_on_scenario(&sc, &MethodConfig::cs2k(), &hyper, seed).unwrap();

        let resumed = run_steps_from(
            &sc,
            &MethodConfig::cs2k(),
            &hyper,
            full.snapshots[0].clone(),
        )
        .unwrap();
        assert_eq!(resumed.reports.len(), 2);
        assert_eq!(resumed.reports[..], full.reports[1..]);
        assert_eq!(
            resumed.snapshots.last().unwrap().model.params(),
            full.snapshots.last().unwrap().model.params()
        );
    }

    #[test]
    fn median_strategy_runs_and_ignores_contribute_nothing() {
        let sc = generate(&tiny_spec(&[2, 1]), 25).unwrap();
        let hyper = tiny_hyper();
        let out = run_on_scenario(&sc, &MethodConfig::median_pl(), &hyper, 26).unwrap();
        assert_eq!(out.reports.len(), 2);
        // Sanity: the composed loss on ignored-everything input is zero.
        let m = &out.snapshots[1].model;
        let img = &sc.steps[1].images[0];
        let fp = m.forward(&img.features).unwrap();
        let probs = softmax(&fp.logits);
        let all_ignored = vec![true; img.gt_step.len()];
        let l = cross_entropy(&probs, &img.gt_step, Some(&all_ignored)).unwrap();
        assert_eq!(l, 0.0);
    }
}
