//! Replay of old classes through augmented prototypes.
//!
//! Old classes have no pixels in the current step, so their classifier
//! rows train on synthetic embeddings instead: the stored prototype plus
//! scaled Gaussian noise (spread matched to history via the step scaling
//! factor), and random mixtures of two old prototypes with the mixing
//! weight re-used as the loss weight. Prototypes are constants here; only
//! classifier parameters ever receive gradient from this loss.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::proto::PrototypeStore;

#[derive(Debug, Clone, PartialEq)]
pub enum AugmentKind {
    SelfNoise,
    Mix { partner_class: usize, lambda: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPrototype {
    pub vector: Vec<f64>,
    pub source_class: usize,
    pub kind: AugmentKind,
}

/// Noise scale for step `t`: the previous step's classes contribute their
/// own spread, all earlier classes the spread recorded the step before
/// that, weighted by class counts.
pub fn scaling_factor(t: usize, store: &PrototypeStore) -> Result<f64> {
    if t == 0 {
        return Err(Error::config("scaling factor is defined from step 1 on"));
    }
    let sigma = |step: usize| -> Result<f64> {
        store
            .sigma_history
            .get(&step)
            .copied()
            .ok_or_else(|| Error::config(format!("missing sigma history for step {step}")))
    };
    let count = |step: usize| -> Result<usize> {
        store
            .class_counts
            .get(&step)
            .copied()
            .ok_or_else(|| Error::config(format!("missing class count for step {step}")))
    };
    if t == 1 {
        return sigma(0);
    }
    let mut older_count = 0usize; // classes introduced before step t-1
    for m in 0..t - 1 {
        older_count += count(m)?;
    }
    let last_count = count(t - 1)?;
    let num = last_count as f64 * sigma(t - 1)? + older_count as f64 * sigma(t - 2)?;
    Ok(num / (older_count + last_count) as f64)
}

/// Deterministic core of [`self_augment`]: prototype plus `scale * noise`.
pub fn self_augment_with_noise(
    source_class: usize,
    eta: &[f64],
    scale: f64,
    noise: &[f64],
) -> Result<AugmentedPrototype> {
    if source_class == 0 {
        return Err(Error::input("background has no prototype to augment"));
    }
    if scale < 0.0 {
        return Err(Error::config("noise scale must be non-negative"));
    }
    if noise.len() != eta.len() {
        return Err(Error::input("noise dimension mismatch".to_string()));
    }
    Ok(AugmentedPrototype {
        vector: eta.iter().zip(noise).map(|(e, n)| e + scale * n).collect(),
        source_class,
        kind: AugmentKind::SelfNoise,
    })
}

/// Prototype jittered by i.i.d. standard normal noise times `scale`.
pub fn self_augment<R: Rng>(
    source_class: usize,
    eta: &[f64],
    scale: f64,
    rng: &mut R,
) -> Result<AugmentedPrototype> {
    let noise: Vec<f64> = (0..eta.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    self_augment_with_noise(source_class, eta, scale, &noise)
}

/// Deterministic core of [`inter_augment`]: convex combination at `lambda`.
pub fn inter_augment_with_lambda(
    source_class: usize,
    eta: &[f64],
    partner_class: usize,
    eta_partner: &[f64],
    lambda: f64,
) -> Result<AugmentedPrototype> {
    if source_class == 0 || partner_class == 0 {
        return Err(Error::input("background has no prototype to augment"));
    }
    if source_class == partner_class {
        return Err(Error::input(
            "mixture partner must differ from the source class",
        ));
    }
    if eta.len() != eta_partner.len() {
        return Err(Error::input("prototype dimension mismatch".to_string()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::input(format!("lambda {lambda} outside [0,1]")));
    }
    Ok(AugmentedPrototype {
        vector: eta
            .iter()
            .zip(eta_partner)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect(),
        source_class,
        kind: AugmentKind::Mix {
            partner_class,
            lambda,
        },
    })
}

/// Mixture of two old-class prototypes at a uniform random weight.
pub fn inter_augment<R: Rng>(
    source_class: usize,
    eta: &[f64],
    partner_class: usize,
    eta_partner: &[f64],
    rng: &mut R,
) -> Result<AugmentedPrototype> {
    let lambda: f64 = rng.random();
    inter_augment_with_lambda(source_class, eta, partner_class, eta_partner, lambda)
}

/// Replay loss over all old foreground classes, optionally accumulating
/// classifier gradients. Per class (ascending id): one jittered prototype
/// trained toward its class, and — when another old class exists — one
/// mixture whose two cross-entropy terms are weighted by the drawn lambda
/// and its complement. The total is divided by the old-class count.
///
/// Draw order per class: `rng_self` supplies the noise components, then
/// `rng_inter` supplies the partner index followed by lambda. The two
/// streams are separate so disabling one mechanism leaves the other's
/// draws unchanged.
#[allow(clippy::too_many_arguments)]
pub fn loss_pa<R: Rng>(
    model: &Model,
    store: &PrototypeStore,
    s_t: f64,
    use_self: bool,
    use_inter: bool,
    rng_self: &mut R,
    rng_inter: &mut R,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let old: Vec<usize> = store.class_ids();
    if old.is_empty() {
        return Ok(0.0);
    }
    let denom = old.len() as f64;
    let mut total = 0.0;
    for &c in &old {
        let eta = &store.prototypes[&c];
        if use_self {
            let gamma = self_augment(c, eta, s_t, rng_self)?;
            total += model.classifier_weighted_ce(
                &gamma.vector,
                &[(c, 1.0)],
                1.0 / denom,
                grad.as_deref_mut(),
            )?;
        }
        if use_inter && old.len() > 1 {
            let others: Vec<usize> = old.iter().copied().filter(|&o| o != c).collect();
            let partner = others[rng_inter.random_range(0..others.len())];
            let pi = inter_augment(c, eta, partner, &store.prototypes[&partner], rng_inter)?;
            let AugmentKind::Mix { lambda, .. } = pi.kind else {
                unreachable!("inter_augment returns a mixture");
            };
            total += model.classifier_weighted_ce(
                &pi.vector,
                &[(c, lambda), (partner, 1.0 - lambda)],
                1.0 / denom,
                grad.as_deref_mut(),
            )?;
        }
    }
    Ok(total / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::collections::BTreeMap;

    fn history(sigmas: &[f64], counts: &[usize]) -> PrototypeStore {
        PrototypeStore {
            sigma_history: sigmas.iter().copied().enumerate().collect(),
            class_counts: counts.iter().copied().enumerate().collect(),
            ..PrototypeStore::new()
        }
    }

    #[test]
    fn scaling_factor_first_step_is_initial_sigma() {
        let store = history(&[2.5], &[4]);
        assert_eq!(scaling_factor(1, &store).unwrap(), 2.5);
    }

    #[test]
    fn scaling_factor_constant_sigma_is_a_fixpoint() {
        for counts in [[4usize, 1], [2, 3], [7, 7]] {
            let store = history(&[0.7, 0.7], &counts);
            assert!((scaling_factor(2, &store).unwrap() - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn scaling_factor_matches_direct_evaluation() {
        // counts [4, 1], sigma [2, 1] -> (1*1 + 4*2) / 5 = 1.8
        let store = history(&[2.0, 1.0], &[4, 1]);
        assert!((scaling_factor(2, &store).unwrap() - 1.8).abs() < 1e-12);
    }

    #[test]
    fn scaling_factor_missing_history_is_config_error() {
        let store = history(&[2.0], &[4]);
        assert!(matches!(
            scaling_factor(2, &store).unwrap_err(),
            Error::Config(_)
        ));
        assert!(matches!(
            scaling_factor(0, &store).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn scaling_factor_is_one_homogeneous_in_sigma() {
        let mut rng = stream(1, "augscale", 0);
        for t in 2..5usize {
            let sigmas: Vec<f64> = (0..t).map(|_| rng.random::<f64>() * 3.0).collect();
            let counts: Vec<usize> = (0..t).map(|_| rng.random_range(1..6)).collect();
            let base = scaling_factor(t, &history(&sigmas, &counts)).unwrap();
            let alpha = 3.7;
            let scaled: Vec<f64> = sigmas.iter().map(|s| s * alpha).collect();
            let got = scaling_factor(t, &history(&scaled, &counts)).unwrap();
            assert!((got - alpha * base).abs() < 1e-9 * base.abs().max(1.0));
        }
    }

    #[test]
    fn self_augment_degenerate_cases_return_the_prototype() {
        let eta = vec![1.0, -2.0, 0.5];
        let g = self_augment_with_noise(3, &eta, 0.0, &[9.0, 9.0, 9.0]).unwrap();
        assert_eq!(g.vector, eta);
        let g = self_augment_with_noise(3, &eta, 2.0, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.vector, eta);
        assert_eq!(g.kind, AugmentKind::SelfNoise);
        assert_eq!(g.source_class, 3);
    }

    #[test]
    fn self_augment_matches_replayed_draws() {
        let eta = vec![0.4, 1.1];
        let mut rng = stream(5, "augself", 0);
        let mut replay = rng.clone();
        let g = self_augment(1, &eta, 1.7, &mut rng).unwrap();
        let mu: Vec<f64> = (0..2)
            .map(|_| replay.sample::<f64, _>(StandardNormal))
            .collect();
        for j in 0..2 {
            assert_eq!(g.vector[j], eta[j] + 1.7 * mu[j]);
        }
    }

    #[test]
    fn augmenting_background_is_rejected() {
        let err = self_augment_with_noise(0, &[1.0], 1.0, &[0.0]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        let err = inter_augment_with_lambda(0, &[1.0], 2, &[0.0], 0.5).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        let err = inter_augment_with_lambda(2, &[1.0], 0, &[0.0], 0.5).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn inter_augment_endpoints_and_midpoint() {
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 2.0];
        let p = inter_augment_with_lambda(1, &a, 2, &b, 1.0).unwrap();
        assert_eq!(p.vector, a);
        let p = inter_augment_with_lambda(1, &a, 2, &b, 0.0).unwrap();
        assert_eq!(p.vector, b);
        let p = inter_augment_with_lambda(1, &a, 2, &b, 0.5).unwrap();
        assert_eq!(p.vector, vec![0.5, 1.0]);
        assert_eq!(
            p.kind,
            AugmentKind::Mix {
                partner_class: 2,
                lambda: 0.5
            }
        );
    }

    #[test]
    fn inter_augment_same_class_is_input_error() {
        let err = inter_augment_with_lambda(1, &[1.0], 1, &[2.0], 0.5).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn mixtures_lie_on_the_segment_between_prototypes() {
        let mut rng = stream(7, "auginter", 0);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for _ in 0..100 {
            let a: Vec<f64> = (0..5)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let b: Vec<f64> = (0..5)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let p = inter_augment(1, &a, 2, &b, &mut rng).unwrap();
            let da: Vec<f64> = p.vector.iter().zip(&a).map(|(x, y)| x - y).collect();
            let db: Vec<f64> = p.vector.iter().zip(&b).map(|(x, y)| x - y).collect();
            let dab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            assert!((norm(&da) + norm(&db) - norm(&dab)).abs() < 1e-9);
            let AugmentKind::Mix { lambda, .. } = p.kind else {
                panic!("expected mixture")
            };
            assert!((0.0..=1.0).contains(&lambda));
        }
    }

    fn replay_model(seed: u64, rows: usize) -> Model {
        let arch = Architecture {
            input_dim: 3,
            hidden: vec![4],
            embed_dim: 2,
        };
        let mut rng = stream(seed, "augmodel", 0);
        Model::new(&arch, rows, &mut rng).unwrap()
    }

    #[test]
    fn loss_pa_is_zero_without_old_classes() {
        let m = replay_model(1, 3);
        let store = PrototypeStore::new();
        let mut a = stream(2, "s", 0);
        let mut b = stream(2, "i", 0);
        let l = loss_pa(&m, &store, 1.0, true, true, &mut a, &mut b, None).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn loss_pa_matches_hand_computed_terms() {
        let m = replay_model(3, 3);
        let mut store = PrototypeStore::new();
        store.prototypes.insert(1, vec![0.8, -0.3]);
        store.prototypes.insert(2, vec![-1.2, 0.6]);
        let s_t = 0.9;

        let mut rng_self = stream(4, "augpl_s", 0);
        let mut rng_inter = stream(4, "augpl_i", 0);
        let mut replay_self = rng_self.clone();
        let mut replay_inter = rng_inter.clone();

        let got = loss_pa(
            &m,
            &store,
            s_t,
            true,
            true,
            &mut rng_self,
            &mut rng_inter,
            None,
        )
        .unwrap();

        // Hand replay: per class ascending — noise draws, partner index,
        // lambda; three CE terms per class, all divided by the class count.
        let ce = |v: &[f64], target: usize| -> f64 {
            let logits = m.classifier_logits(v).unwrap();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            -((logits[target] - max).exp() / z).ln()
        };
        let mut expect = 0.0;
        for &c in &[1usize, 2] {
            let eta = store.prototypes[&c].clone();
            let mu: Vec<f64> = (0..2)
                .map(|_| replay_self.sample::<f64, _>(StandardNormal))
                .collect();
            let gamma: Vec<f64> = eta.iter().zip(&mu).map(|(e, n)| e + s_t * n).collect();
            expect += ce(&gamma, c);

            let others: Vec<usize> = [1usize, 2].iter().copied().filter(|&o| o != c).collect();
            let partner = others[replay_inter.random_range(0..others.len())];
            let lambda: f64 = replay_inter.random();
            let etap = &store.prototypes[&partner];
            let pi: Vec<f64> = eta
                .iter()
                .zip(etap)
                .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
                .collect();
            expect += lambda * ce(&pi, c) + (1.0 - lambda) * ce(&pi, partner);
        }
        expect /= 2.0;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn loss_pa_skips_inter_with_single_old_class() {
        let m = replay_model(5, 2);
        let mut store = PrototypeStore::new();
        store.prototypes.insert(1, vec![0.5, 0.5]);
        let mut a = stream(6, "s", 0);
        let mut b = stream(6, "i", 0);
        let mut before = b.clone();
        let l = loss_pa(&m, &store, 0.0, true, true, &mut a, &mut b, None).unwrap();
        // Only the self term contributed, and the inter stream is untouched.
        let ce0 = m
            .classifier_weighted_ce(&store.prototypes[&1], &[(1, 1.0)], 1.0, None)
            .unwrap();
        assert!((l - ce0).abs() < 1e-12);
        for _ in 0..4 {
            assert_eq!(b.random::<u64>(), before.random::<u64>());
        }
    }

    #[test]
    fn loss_pa_gradient_never_touches_the_extractor() {
        let m = replay_model(7, 4);
        let mut store = PrototypeStore::new();
        store.prototypes.insert(1, vec![1.0, 0.2]);
        store.prototypes.insert(2, vec![-0.4, 0.9]);
        store.prototypes.insert(3, vec![0.1, -1.5]);
        let mut a = stream(8, "s", 0);
        let mut b = stream(8, "i", 0);
        let mut grad = vec![0.0; m.num_params()];
        let l = loss_pa(&m, &store, 1.3, true, true, &mut a, &mut b, Some(&mut grad)).unwrap();
        assert!(l > 0.0);
        let ext = m.extractor_param_range();
        assert!(grad[ext.clone()].iter().all(|&g| g == 0.0));
        assert!(grad[ext.end..].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn disabling_one_mechanism_leaves_the_other_stream_consumed_identically() {
        let m = replay_model(9, 3);
        let mut store = PrototypeStore::new();
        store.prototypes.insert(1, vec![0.3, 0.3]);
        store.prototypes.insert(2, vec![-0.3, 0.8]);

        // Inter-only run with fresh streams...
        let mut a1 = stream(10, "s", 0);
        let mut b1 = stream(10, "i", 0);
        let inter_only = loss_pa(&m, &store, 1.0, false, true, &mut a1, &mut b1, None).unwrap();
        // ...matches the inter portion of a full run with the same seeds.
        let mut a2 = stream(10, "s", 0);
        let mut b2 = stream(10, "i", 0);
        let full = loss_pa(&m, &store, 1.0, true, true, &mut a2, &mut b2, None).unwrap();
        let mut a3 = stream(10, "s", 0);
        let mut b3 = stream(10, "i", 0);
        let self_only = loss_pa(&m, &store, 1.0, true, false, &mut a3, &mut b3, None).unwrap();
        assert!((full - (inter_only + self_only)).abs() < 1e-12);
    }

    #[test]
    fn sigma_map_helper_builds_expected_history() {
        let store = history(&[1.0, 2.0, 3.0], &[4, 1, 1]);
        let expect: BTreeMap<usize, f64> =
            [(0usize, 1.0), (1, 2.0), (2, 3.0)].into_iter().collect();
        assert_eq!(store.sigma_history, expect);
    }
}
