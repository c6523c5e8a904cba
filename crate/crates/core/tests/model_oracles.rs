// SPDX-License-Identifier: MIT OR Apache-2.0

//! Finite-difference and decomposition oracles for the replacement model.

use ndarray::Array1;
use pie_core::model::{ForwardOptions, SiteDelta};
use pie_core::{
    Activation, AttentionKind, ErrorMode, FeatureOccurrence, Metric, MetricKind, ModelConfig,
    PatchAction, PatchSpec, ReplacementModel, RunTrace, TokenId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(activation: Activation, attention: AttentionKind, error_mode: ErrorMode) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 4,
        vocab_size: 12,
        features_per_layer: 8,
        activation,
        attention,
        error_mode,
        seed: 5,
        target_density: 0.3,
        ..ModelConfig::default()
    }
}

fn metric_at(model: &ReplacementModel, tokens: &[TokenId], base: &RunTrace, metric: &Metric, delta: Option<SiteDelta>) -> f64 {
    let deltas: Vec<SiteDelta> = delta.into_iter().collect();
    let frozen = base.error_terms().clone();
    let trace = model
        .forward_with(
            tokens,
            &ForwardOptions {
                frozen_errors: Some(&frozen),
                site_deltas: &deltas,
                ..ForwardOptions::default()
            },
        )
        .unwrap();
    metric.evaluate(&trace)
}

/// Central differences with step 1e-5 on random (site, position, coordinate)
/// probes; returns the worst relative error.
fn worst_fd_error(model: &ReplacementModel, metric_kind: MetricKind, probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.d_model();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < probes {
        let len = rng.random_range(3..7);
        let tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..12)).collect();
        let base = model.forward(&tokens, None, None).unwrap();
        let metric = match metric_kind {
            MetricKind::LogitDifference => Metric::from_kind(metric_kind, Some((1, 2)), None).unwrap(),
            MetricKind::NegativeKl => {
                // reference: a fixed distribution different from the run's own
                let mut p: Vec<f64> = (0..12).map(|i| 1.0 + i as f64).collect();
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|v| *v /= s);
                Metric::from_kind(metric_kind, None, Some(&p)).unwrap()
            }
        };
        let grads = model.backward(&base, &metric).unwrap();
        assert!(grads.is_finite());
        for _ in 0..10 {
            let site = rng.random_range(0..grads.num_sites());
            let pos = rng.random_range(0..len);
            let coord = rng.random_range(0..d);
            let mut e = Array1::zeros(d);
            e[coord] = h;
            let plus = metric_at(model, &tokens, &base, &metric, Some(SiteDelta { site, position: pos, delta: e.clone() }));
            let minus = metric_at(model, &tokens, &base, &metric, Some(SiteDelta { site, position: pos, delta: -e }));
            let fd = (plus - minus) / (2.0 * h);
            let analytic = grads.site(site)[[pos, coord]];
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            done += 1;
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    for attention in [AttentionKind::None, AttentionKind::SingleHead, AttentionKind::Positional] {
        for error_mode in [ErrorMode::SyntheticExact, ErrorMode::FrozenError] {
            let model = ReplacementModel::build(config(Activation::Relu, attention, error_mode)).unwrap();
            for kind in [MetricKind::LogitDifference, MetricKind::NegativeKl] {
                let worst = worst_fd_error(&model, kind, 120, 11);
                assert!(worst <= 1e-4, "{attention:?} {error_mode:?} {kind}: worst rel err {worst}");
            }
        }
    }
}

#[test]
fn constant_metric_has_zero_gradient() {
    let model = ReplacementModel::build(config(Activation::Relu, AttentionKind::SingleHead, ErrorMode::SyntheticExact)).unwrap();
    let trace = model.forward(&[1, 2, 3, 4], None, None).unwrap();
    let metric = Metric::LogitDifference { target: 3, distractor: 3 };
    let grads = model.backward(&trace, &metric).unwrap();
    for s in 0..grads.num_sites() {
        assert!(grads.site(s).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn negative_kl_against_own_distribution_is_zero() {
    let model = ReplacementModel::build(config(Activation::Relu, AttentionKind::SingleHead, ErrorMode::SyntheticExact)).unwrap();
    let trace = model.forward(&[4, 2, 9], None, None).unwrap();
    let metric = Metric::NegativeKl { reference: trace.last_distribution() };
    assert_eq!(metric.evaluate(&trace), 0.0);
    let grads = model.backward(&trace, &metric).unwrap();
    let max = (0..grads.num_sites())
        .flat_map(|s| grads.site(s).iter().copied().collect::<Vec<_>>())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max < 1e-12);
}

#[test]
fn missing_metric_arguments_are_rejected() {
    assert!(matches!(
        Metric::from_kind(MetricKind::LogitDifference, None, None),
        Err(pie_core::PieError::Argument(_))
    ));
    assert!(matches!(
        Metric::from_kind(MetricKind::NegativeKl, Some((1, 2)), None),
        Err(pie_core::PieError::Argument(_))
    ));
}

#[test]
fn residual_is_embedding_plus_feature_writes_plus_error() {
    for error_mode in [ErrorMode::SyntheticExact, ErrorMode::FrozenError] {
        let model = ReplacementModel::build(config(Activation::Relu, AttentionKind::SingleHead, error_mode)).unwrap();
        let tokens = [3, 1, 4, 1, 5, 9];
        let trace = model.forward(&tokens, None, None).unwrap();
        let w = model.weights();
        for site in 0..trace.num_sites() {
            for (t, &tok) in tokens.iter().enumerate() {
                let mut expect = &w.embedding.row(tok as usize) + &w.positional.row(t);
                for receiver in 0..site {
                    for layer in 0..=receiver {
                        let dec = model.decoder(layer, receiver).unwrap();
                        for f in 0..model.features_per_layer() {
                            let a = trace.activation(FeatureOccurrence::new(layer, f, t));
                            expect = expect + &dec.row(f) * a;
                        }
                    }
                    expect = expect + &trace.error_terms()[receiver].row(t);
                }
                let got = trace.residual(site, t);
                let diff = (&got - &expect).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
                assert!(diff <= 1e-9, "site {site} pos {t}: {diff}");
            }
        }
        if error_mode == ErrorMode::SyntheticExact {
            assert!(trace.error_terms().iter().all(|e| e.iter().all(|v| *v == 0.0)));
        }
    }
}

#[test]
fn output_distributions_are_normalised() {
    let model = ReplacementModel::build(config(Activation::Relu, AttentionKind::SingleHead, ErrorMode::SyntheticExact)).unwrap();
    let trace = model.forward(&[0, 1, 2, 3, 4, 5, 6], None, None).unwrap();
    for t in 0..trace.len() {
        let p = trace.distribution(t);
        assert!(p.iter().all(|v| *v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn inactive_slots_are_exact_zeros() {
    let model = ReplacementModel::build(config(Activation::JumpRelu { threshold: 0.2 }, AttentionKind::SingleHead, ErrorMode::SyntheticExact)).unwrap();
    let trace = model.forward(&[7, 3, 2, 8], None, None).unwrap();
    for l in 0..2 {
        for t in 0..4 {
            for f in 0..8 {
                let occ = FeatureOccurrence::new(l, f, t);
                if trace.preactivation(occ) <= 0.2 {
                    assert_eq!(trace.activation(occ), 0.0);
                }
            }
        }
    }
}

#[test]
fn identity_patch_and_inactive_patch_are_no_ops() {
    let model = ReplacementModel::build(config(Activation::Relu, AttentionKind::SingleHead, ErrorMode::SyntheticExact)).unwrap();
    let tokens = [1, 6, 2, 8, 3];
    let plain = model.forward(&tokens, None, None).unwrap();
    let empty = model.forward(&tokens, Some(&PatchSpec::new()), None).unwrap();
    assert_eq!(plain.logits(), empty.logits());
    assert_eq!(plain.residual_site(2), empty.residual_site(2));

    let all: Vec<FeatureOccurrence> = (0..2)
        .flat_map(|l| (0..8).flat_map(move |f| (0..5).map(move |t| FeatureOccurrence::new(l, f, t))))
        .collect();
    let inactive = all.iter().copied().find(|o| plain.activation(*o) == 0.0).expect("some inactive slot");
    let zeroed = model
        .forward(&tokens, Some(&PatchSpec::uniform([inactive], PatchAction::Zero)), None)
        .unwrap();
    assert_eq!(zeroed.logits(), plain.logits());
}

#[test]
fn freezing_everything_to_corrupted_reproduces_corrupted_output() {
    let model = ReplacementModel::build(config(Activation::Relu, AttentionKind::SingleHead, ErrorMode::SyntheticExact)).unwrap();
    // the residual at the last position is its own embedding plus the feature
    // writes at that position, so prompts sharing the last token agree once
    // every feature is substituted
    let clean = [1, 6, 2, 8, 3];
    let corrupted = [1, 9, 2, 4, 3];
    let corr_trace = model.forward(&corrupted, None, None).unwrap();
    let all: Vec<FeatureOccurrence> = (0..2)
        .flat_map(|l| (0..8).flat_map(move |f| (0..5).map(move |t| FeatureOccurrence::new(l, f, t))))
        .collect();
    let patched = model
        .forward(&clean, Some(&PatchSpec::uniform(all, PatchAction::FreezeToCorrupted)), Some(&corr_trace))
        .unwrap();
    assert_eq!(patched.last_distribution(), corr_trace.last_distribution());
}

#[test]
fn freeze_without_reference_or_with_wrong_length_fails() {
    let model = ReplacementModel::build(config(Activation::Relu, AttentionKind::None, ErrorMode::SyntheticExact)).unwrap();
    let patch = PatchSpec::uniform([FeatureOccurrence::new(0, 0, 0)], PatchAction::FreezeToClean);
    assert!(matches!(
        model.forward(&[1, 2, 3], Some(&patch), None),
        Err(pie_core::PieError::Argument(_))
    ));
    let short = model.forward(&[1, 2], None, None).unwrap();
    assert!(matches!(
        model.forward(&[1, 2, 3], Some(&patch), Some(&short)),
        Err(pie_core::PieError::Shape(_))
    ));
}

#[test]
fn linear_model_patch_effect_equals_first_order_estimate() {
    let model = ReplacementModel::build(config(Activation::Identity, AttentionKind::None, ErrorMode::SyntheticExact)).unwrap();
    let clean = [1, 2, 3, 4];
    let corrupted = [1, 5, 3, 7];
    let ct = model.forward(&clean, None, None).unwrap();
    let xt = model.forward(&corrupted, None, None).unwrap();
    let metric = Metric::LogitDifference { target: 2, distractor: 5 };
    let grads = model.backward(&ct, &metric).unwrap();
    let base = metric.evaluate(&ct);
    for l in 0..2 {
        let sens = model.write_sensitivity(&grads, l);
        for f in 0..8 {
            for t in 0..4 {
                let occ = FeatureOccurrence::new(l, f, t);
                let delta = ct.activation(occ) - xt.activation(occ);
                let patched = model
                    .forward(&clean, Some(&PatchSpec::uniform([occ], PatchAction::FreezeToCorrupted)), Some(&xt))
                    .unwrap();
                let exact = base - metric.evaluate(&patched);
                let first_order = delta * sens[[t, f]];
                assert!((exact - first_order).abs() < 1e-9, "{occ}: {exact} vs {first_order}");
            }
        }
    }
}
