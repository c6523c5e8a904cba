// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use ndarray::{array, Array1, Array2};
use pie_core::attribution::{
    lrp_epsilon_linear, score, score_activation_magnitude, score_factp, score_fap, score_relp,
    select_random_active, select_topk, stats, unique_union, AttributionOptions, RetainedOccurrence,
};
use pie_core::model::Weights;
use pie_core::tasks::{generate_ioi_like, Vocabulary};
use pie_core::{
    Activation, AttentionKind, Circuit, FeatureOccurrence, Method, MetricKind, ModelConfig,
    PromptContext, PromptPair, ReplacementModel, ScoreTable, TaskDataset,
};
use proptest::prelude::*;

fn cfg(activation: Activation, attention: AttentionKind) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 8,
        vocab_size: 32,
        features_per_layer: 16,
        activation,
        attention,
        seed: 21,
        target_density: 0.1,
        ..ModelConfig::default()
    }
}

fn prompts(n: usize, vocab: usize) -> TaskDataset {
    generate_ioi_like(n, 4, &Vocabulary::synthetic(vocab).unwrap()).unwrap()
}

fn table(method: Method, scores: &[(FeatureOccurrence, f64)]) -> ScoreTable {
    ScoreTable {
        prompt_id: "p".into(),
        method,
        metric: None,
        gradient_run: None,
        scores: scores.iter().copied().collect(),
    }
}

#[test]
fn linear_model_fap_equals_factp_equals_patch_effect() {
    let opts = AttributionOptions::default();
    for attention in [AttentionKind::None, AttentionKind::Positional] {
        let model = ReplacementModel::build(cfg(Activation::Identity, attention)).unwrap();
        let mut nonzero = 0;
        for pair in &prompts(8, 32).pairs {
            let ctx = PromptContext::new(&model, pair).unwrap();
            let metric = ctx.metric(MetricKind::LogitDifference).unwrap();
            let fap = score_fap(&ctx, &opts).unwrap();
            let factp = score_factp(&ctx, MetricKind::LogitDifference).unwrap();
            assert_eq!(fap.len(), 2 * 16 * pair.len());
            for (occ, s) in &fap.scores {
                let exact = ctx.patch_effect(&metric, *occ).unwrap();
                assert!((s - exact).abs() <= 1e-9, "{occ}: fap {s} exact {exact}");
                assert!((factp.scores[occ] - exact).abs() <= 1e-9);
                nonzero += usize::from(exact.abs() > 1e-12);
            }
        }
        // without position mixing the corrupted positions cannot reach the
        // last-token logits
        if attention == AttentionKind::Positional {
            assert!(nonzero > 0);
        } else {
            assert_eq!(nonzero, 0);
        }
    }
}

#[test]
fn relu_fap_ranks_like_exact_patch_effects() {
    for attention in [AttentionKind::SingleHead, AttentionKind::Positional] {
        let model = ReplacementModel::build(ModelConfig {
            target_density: 0.3,
            ..cfg(Activation::Relu, attention)
        })
        .unwrap();
        let mut rhos = Vec::new();
        for pair in &prompts(8, 32).pairs {
            let ctx = PromptContext::new(&model, pair).unwrap();
            let metric = ctx.metric(MetricKind::LogitDifference).unwrap();
            let fap = score_fap(&ctx, &AttributionOptions::default()).unwrap();
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (occ, s) in &fap.scores {
                a.push(s.abs());
                b.push(ctx.patch_effect(&metric, *occ).unwrap().abs());
            }
            rhos.push(stats::spearman(&a, &b).expect("some occurrence matters"));
        }
        let mean = stats::mean_std(&rhos).0;
        assert!(mean >= 0.9, "{attention:?}: mean spearman {mean} {rhos:?}");
    }
}

#[test]
fn unchanged_activation_scores_zero_under_every_method() {
    let model = ReplacementModel::build(cfg(Activation::Relu, AttentionKind::SingleHead)).unwrap();
    let pair = &prompts(1, 32).pairs[0];
    let ctx = PromptContext::new(&model, pair).unwrap();
    let opts = AttributionOptions::default();
    let fap = score_fap(&ctx, &opts).unwrap();
    let relp = score_relp(&ctx, &opts).unwrap();
    let factp = score_factp(&ctx, MetricKind::LogitDifference).unwrap();
    let mut seen = 0;
    for occ in ctx.scoreable() {
        if ctx.clean.activation(occ) == ctx.corrupted.activation(occ) {
            seen += 1;
            assert_eq!(fap.scores[&occ], 0.0);
            assert_eq!(relp.scores[&occ], 0.0);
            assert_eq!(factp.scores[&occ], 0.0);
        }
    }
    // position 0 (BOS) and 1 are identical before the corrupted name
    assert!(seen > 0);
}

#[test]
fn relp_matches_fap_ranking_on_linear_models() {
    let model = ReplacementModel::build(cfg(Activation::Identity, AttentionKind::None)).unwrap();
    let opts = AttributionOptions {
        lrp_epsilon: 1e-12,
        ..AttributionOptions::default()
    };
    for pair in &prompts(4, 32).pairs {
        let ctx = PromptContext::new(&model, pair).unwrap();
        let fap = score_fap(&ctx, &opts).unwrap();
        let relp = score_relp(&ctx, &opts).unwrap();
        let order = |t: &ScoreTable| t.ranked().into_iter().map(|(o, _)| o).collect::<Vec<_>>();
        assert_eq!(order(&fap), order(&relp));
    }
}

#[test]
fn relp_rejects_non_positive_epsilon() {
    let model = ReplacementModel::build(cfg(Activation::Relu, AttentionKind::None)).unwrap();
    let ctx = PromptContext::new(&model, &prompts(1, 32).pairs[0]).unwrap();
    let opts = AttributionOptions {
        lrp_epsilon: 0.0,
        ..AttributionOptions::default()
    };
    assert!(score_relp(&ctx, &opts).is_err());
}

#[test]
fn epsilon_rule_conserves_relevance_through_a_linear_layer() {
    let x = array![0.7, -1.2, 0.4, 2.0];
    let w = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
    let r_out = array![0.5, -0.25, 1.5];
    let r_in = lrp_epsilon_linear(&x, &w, &r_out, 1e-6).unwrap();
    assert!((r_in.sum() - r_out.sum()).abs() <= 1e-6, "{} vs {}", r_in.sum(), r_out.sum());
    assert!(lrp_epsilon_linear(&x, &w, &Array1::zeros(2), 1e-6).is_err());
}

#[test]
fn activation_magnitude_ignores_the_corrupted_prompt() {
    let model = ReplacementModel::build(cfg(Activation::Relu, AttentionKind::SingleHead)).unwrap();
    let pair = prompts(1, 32).pairs[0].clone();
    let mut other = pair.clone();
    other.corrupted = pair.clean.iter().map(|t| (t + 1) % 32).collect();
    other.corrupted[0] = pair.clean[0];
    let a = score_activation_magnitude(&PromptContext::new(&model, &pair).unwrap()).unwrap();
    let b = score_activation_magnitude(&PromptContext::new(&model, &other).unwrap()).unwrap();
    for occ in PromptContext::new(&model, &pair).unwrap().clean.active_occurrences() {
        assert_eq!(a.scores[&occ], b.scores[&occ]);
        assert!(a.scores[&occ] > 0.0);
    }
    for (occ, s) in &a.scores {
        if PromptContext::new(&model, &pair).unwrap().clean.activation(*occ) == 0.0 {
            assert_eq!(*s, 0.0);
        }
    }
}

#[test]
fn factp_counts_nonzero_scores() {
    let model = ReplacementModel::build(cfg(Activation::Relu, AttentionKind::SingleHead)).unwrap();
    let ctx = PromptContext::new(&model, &prompts(1, 32).pairs[0]).unwrap();
    let t = score_factp(&ctx, MetricKind::LogitDifference).unwrap();
    assert!(t.nonzero_count() > 0 && t.nonzero_count() <= t.len());
}

#[test]
fn topk_budget_ties_and_order() {
    let o = FeatureOccurrence::new;
    let t = table(
        Method::Fap,
        &[(o(1, 0, 0), -3.0), (o(0, 2, 1), 1.0), (o(0, 1, 4), 1.0), (o(0, 0, 0), 0.5)],
    );
    let top1 = select_topk(&t, 1).unwrap();
    assert_eq!(top1.retained[0].occurrence, o(1, 0, 0));
    let top2 = select_topk(&t, 2).unwrap();
    assert_eq!(top2.retained[1].occurrence, o(0, 1, 4));
    let all = select_topk(&t, 10).unwrap();
    assert_eq!(all.len(), 4);
    assert_eq!(all.k, 10);
    assert!(select_topk(&t, 0).is_err());
}

fn circuit(occs: &[(usize, usize, usize)]) -> Circuit {
    Circuit {
        prompt_id: "p".into(),
        method: Method::Fap,
        k: occs.len(),
        retained: occs
            .iter()
            .map(|&(l, f, t)| RetainedOccurrence {
                occurrence: FeatureOccurrence::new(l, f, t),
                score: 1.0,
            })
            .collect(),
    }
}

#[test]
fn unique_union_counting() {
    let a = circuit(&[(0, 1, 0), (0, 2, 3), (1, 1, 2)]);
    assert_eq!(unique_union([&a]).len(), 3);
    let twice = unique_union([&a, &a]);
    assert_eq!(twice.len(), 3);
    assert!(twice.counts.values().all(|c| *c == 2));
    let b = circuit(&[(1, 5, 0), (1, 6, 1)]);
    assert_eq!(unique_union([&a, &b]).len(), 5);
    // same feature at two positions collapses
    assert_eq!(unique_union([&circuit(&[(0, 1, 0), (0, 1, 4)])]).len(), 1);
}

#[test]
fn random_active_sampling() {
    let model = ReplacementModel::build(cfg(Activation::Relu, AttentionKind::SingleHead)).unwrap();
    let ctx = PromptContext::new(&model, &prompts(1, 32).pairs[0]).unwrap();
    let pool: BTreeSet<_> = ctx.scoreable().into_iter().collect();
    let all = select_random_active(&ctx, pool.len() + 5, 3).unwrap();
    assert_eq!(all.occurrence_set(), pool);
    let a = select_random_active(&ctx, 4, 9).unwrap();
    assert_eq!(a, select_random_active(&ctx, 4, 9).unwrap());
    assert_eq!(a.len(), 4);
    assert!(a.occurrence_set().is_subset(&pool));
}

fn scaled_unembedding(model: &ReplacementModel, c: f64) -> ReplacementModel {
    let mut w: Weights = model.weights().clone();
    w.unembedding *= c;
    ReplacementModel::from_parts(model.config().clone(), w).unwrap()
}

fn budget_model() -> (ReplacementModel, Vec<PromptPair>) {
    let model = ReplacementModel::build(cfg(Activation::Relu, AttentionKind::SingleHead)).unwrap();
    (model, prompts(4, 32).pairs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fap_scales_with_the_metric_and_selection_is_unchanged(c in 0.05f64..20.0, k in 1usize..40, idx in 0usize..4) {
        let (model, pairs) = budget_model();
        let scaled = scaled_unembedding(&model, c);
        let opts = AttributionOptions::default();
        let base = score_fap(&PromptContext::new(&model, &pairs[idx]).unwrap(), &opts).unwrap();
        let up = score_fap(&PromptContext::new(&scaled, &pairs[idx]).unwrap(), &opts).unwrap();
        for (occ, s) in &base.scores {
            prop_assert!((up.scores[occ] - c * s).abs() <= 1e-9 * (1.0 + (c * s).abs()));
        }
        let sel = |t: &ScoreTable| select_topk(t, k).unwrap().occurrence_set();
        prop_assert_eq!(sel(&base), sel(&up));
        prop_assert_eq!(sel(&base), sel(&base.scaled(c)));
    }

    #[test]
    fn every_method_obeys_the_budget_law(k in 1usize..80, idx in 0usize..4, m in 0usize..4) {
        let (model, pairs) = budget_model();
        let ctx = PromptContext::new(&model, &pairs[idx]).unwrap();
        let method = [Method::Fap, Method::ActivationMagnitude, Method::Factp, Method::Relp][m];
        let t = score(&ctx, method, &AttributionOptions::default()).unwrap();
        prop_assert_eq!(t.len(), ctx.scoreable().len());
        prop_assert_eq!(select_topk(&t, k).unwrap().len(), k.min(t.len()));
        prop_assert_eq!(select_random_active(&ctx, k, 1).unwrap().len(), k.min(t.len()));
    }
}
