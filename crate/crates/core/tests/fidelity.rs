// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use pie_core::attribution::AttributionOptions;
use pie_core::fidelity::{
    estimate_cost, eval_faithfulness, eval_kl, eval_prediction_change, evaluate_circuits, report_ratio,
    run_budget_sweep, run_compression_curve, run_synergy_grid, CostCounts, Micros, PromptEvaluator,
};
use pie_core::fixtures::{and_gate_dataset, and_gate_model, cancelling_model, single_pair};
use pie_core::tasks::{generate_ioi_like, Vocabulary};
use pie_core::{
    Activation, AttentionKind, ErrorMode, Method, ModelConfig, PieError, PromptContext, ReplacementModel,
    SweepConfig, TaskDataset,
};

fn relu_model(error_mode: ErrorMode) -> ReplacementModel {
    ReplacementModel::build(ModelConfig {
        num_layers: 2,
        d_model: 8,
        vocab_size: 32,
        features_per_layer: 16,
        error_mode,
        seed: 5,
        target_density: 0.1,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn prompts(n: usize) -> TaskDataset {
    generate_ioi_like(n, 9, &Vocabulary::synthetic(32).unwrap()).unwrap()
}

#[test]
fn faithfulness_endpoints() {
    for mode in [ErrorMode::SyntheticExact, ErrorMode::FrozenError] {
        let model = relu_model(mode);
        for pair in &prompts(6).pairs {
            let ctx = PromptContext::new(&model, pair).unwrap();
            let eval = PromptEvaluator::new(ctx.clone()).unwrap();
            if eval.is_degenerate() {
                continue;
            }
            let all: BTreeSet<_> = ctx.scoreable().into_iter().collect();
            let full = eval.evaluate(&all).unwrap();
            assert!((full.faithfulness.unwrap() - 1.0).abs() <= 1e-9);
            assert!(full.kl.abs() <= 1e-9, "{mode:?}: {}", full.kl);
            assert!(!full.prediction_changed);
            assert_eq!(eval.evaluate(&BTreeSet::new()).unwrap().faithfulness, Some(0.0));
        }
    }
}

#[test]
fn free_functions_agree_with_the_evaluator() {
    let model = relu_model(ErrorMode::SyntheticExact);
    let pair = &prompts(1).pairs[0];
    let ctx = PromptContext::new(&model, pair).unwrap();
    let some: BTreeSet<_> = ctx.scoreable().into_iter().step_by(3).collect();
    let row = PromptEvaluator::new(ctx.clone()).unwrap().evaluate(&some).unwrap();
    assert_eq!(eval_kl(&ctx, &some).unwrap(), row.kl);
    assert_eq!(Some(eval_faithfulness(&ctx, &some).unwrap()), row.faithfulness);
    assert_eq!(eval_prediction_change(&ctx, &some).unwrap(), row.prediction_changed);
}

#[test]
fn degenerate_pair_is_reported_not_divided() {
    let (model, _) = cancelling_model().unwrap();
    // clean and corrupted identical: no gap to recover
    let mut pair = single_pair("same");
    pair.corrupted = pair.clean.clone();
    let ctx = PromptContext::new(&model, &pair).unwrap();
    assert!(matches!(
        eval_faithfulness(&ctx, &BTreeSet::new()),
        Err(PieError::DegeneratePair(id)) if id == "same"
    ));
}

#[test]
fn supersets_can_be_less_faithful() {
    let (model, roles) = cancelling_model().unwrap();
    let ctx = PromptContext::new(&model, &single_pair("cancel")).unwrap();
    let small: BTreeSet<_> = [roles.small].into();
    let bigger: BTreeSet<_> = [roles.small, roles.plus].into();
    assert!((eval_faithfulness(&ctx, &small).unwrap() - 1.0).abs() < 1e-12);
    assert!((eval_faithfulness(&ctx, &bigger).unwrap() - 6.0).abs() < 1e-12);
    assert!(eval_kl(&ctx, &small).unwrap() < 1e-12);
    assert!(eval_kl(&ctx, &bigger).unwrap() > eval_kl(&ctx, &small).unwrap());
    let all: BTreeSet<_> = [roles.small, roles.plus, roles.minus].into();
    assert!(eval_kl(&ctx, &all).unwrap() < 1e-12);
}

#[test]
fn budget_sweep_shape_and_order() {
    let model = relu_model(ErrorMode::SyntheticExact);
    let ds = prompts(4);
    let methods = [Method::Fap, Method::FapSynergy, Method::RandomActive, Method::ActivationMagnitude];
    let budgets = [4, 8];
    let res = run_budget_sweep(&model, &ds, &methods, &budgets, &SweepConfig::default()).unwrap();
    let keys: Vec<_> = res.reports.iter().map(|r| (r.method, r.k)).collect();
    let expect: Vec<_> = methods.iter().flat_map(|&m| budgets.iter().map(move |&k| (m, k))).collect();
    assert_eq!(keys, expect);
    for r in &res.reports {
        let ids: Vec<_> = r.prompts.iter().map(|p| p.prompt_id.as_str()).collect();
        let want: Vec<_> = ds.pairs.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, want);
        assert_eq!(r.aggregate.n_prompts, 4);
    }
    assert_eq!(res.circuits().count(), 4 * methods.len() * budgets.len());
    assert!(res.audit().count() > 0);
    // fap and fap-synergy share one score table; random-active has none
    assert_eq!(res.pruning[0].scores.len(), 3);

    let again = run_budget_sweep(&model, &ds, &methods, &budgets, &SweepConfig::default()).unwrap();
    assert_eq!(res, again);
}

#[test]
fn sweep_rejects_bad_grids() {
    let model = relu_model(ErrorMode::SyntheticExact);
    let ds = prompts(2);
    let cfg = SweepConfig::default();
    assert!(run_budget_sweep(&model, &ds, &[Method::Fap], &[8, 4], &cfg).is_err());
    assert!(run_budget_sweep(&model, &ds, &[Method::Fap], &[0], &cfg).is_err());
    assert!(run_budget_sweep(&model, &ds, &[], &[4], &cfg).is_err());
    assert!(run_budget_sweep(&model, &ds, &[Method::Fap, Method::Fap], &[4], &cfg).is_err());
}

#[test]
fn evaluate_reports_missing_prompts() {
    let model = relu_model(ErrorMode::SyntheticExact);
    let ds = prompts(2);
    let res = run_budget_sweep(&model, &ds, &[Method::Fap], &[4], &SweepConfig::default()).unwrap();
    let circuits: Vec<_> = res.circuits().cloned().collect();
    let fewer = ds.truncated(1);
    let err = evaluate_circuits(&model, &fewer, &circuits).unwrap_err().to_string();
    assert!(err.contains(&ds.pairs[1].id), "{err}");
}

#[test]
fn random_active_needs_more_features_than_fap() {
    let model = relu_model(ErrorMode::SyntheticExact);
    let ds = prompts(8);
    let budgets: Vec<usize> = (1..=24).map(|i| 4 * i).collect();
    let curve =
        run_compression_curve(&model, &ds, 8, &budgets, 10, 3, &AttributionOptions::default()).unwrap();
    let k_cross = curve.k_cross.expect("random circuits eventually match FAP");
    assert!(k_cross > curve.k_ref, "{curve:?}");
    assert!(curve.crossover_ratio().unwrap() > 1.0);
    assert_eq!(curve.points.len(), budgets.len());
}

#[test]
fn synergy_lowers_kl_on_the_planted_dataset() {
    let (model, _) = and_gate_model().unwrap();
    let ds = and_gate_dataset(32).unwrap();
    let res = run_budget_sweep(&model, &ds, &[Method::Fap, Method::FapSynergy], &[6], &SweepConfig::default())
        .unwrap();
    let fap = res.report(Method::Fap, 6).unwrap().aggregate.mean_kl;
    let syn = res.report(Method::FapSynergy, 6).unwrap().aggregate.mean_kl;
    assert!(syn < fap, "synergy {syn} fap {fap}");

    let grid = run_synergy_grid(&model, &ds, 6, &[0.0, 1.0, 3.0], &[10.0, 25.0, 50.0], &SweepConfig::default())
        .unwrap();
    assert_eq!(grid.cells.len(), 9);
    for c in grid.cells.iter().filter(|c| c.lambda == 0.0) {
        assert!(c.delta_mean_mkl.abs() < 1e-9);
    }
    assert!(grid.best().lambda > 0.0, "{grid:?}");
}

#[test]
fn cost_table_reproduces() {
    let c = 0.0235;
    let paper = CostCounts {
        unique_kept: 4_400,
        active_per_prompt: Some(4_188),
        per_prompt_budget: Some(100),
        dictionary: Some(524_288),
    };
    let e = estimate_cost(&paper, c).unwrap();
    assert_eq!(e.c_feat, Micros(23_500));
    assert_eq!(e.active_per_prompt.unwrap().total.to_string(), "$98.42");
    assert_eq!(e.per_prompt_budget.unwrap().total.to_string(), "$2.35");
    assert_eq!(e.unique_kept.total.to_string(), "$103.40");
    assert_eq!(e.dictionary.unwrap().total.to_string(), "$12,320.77");
    assert_eq!(report_ratio(e.per_prompt_ratio.unwrap()), "41.9x");
    assert_eq!(report_ratio(e.global_ratio.unwrap()), "119x");
    assert_eq!(e.global_savings.unwrap().to_string(), "$12,217.37");

    let second = CostCounts {
        unique_kept: 4_000,
        active_per_prompt: Some(5_190),
        per_prompt_budget: Some(100),
        dictionary: Some(425_984),
    };
    let e = estimate_cost(&second, c).unwrap();
    assert_eq!(e.active_per_prompt.unwrap().total.to_string(), "$121.97");
    assert_eq!(e.unique_kept.total.to_string(), "$94.00");
    assert_eq!(e.dictionary.unwrap().total.to_string(), "$10,010.62");
    assert_eq!(report_ratio(e.per_prompt_ratio.unwrap()), "51.9x");
    assert_eq!(report_ratio(e.global_ratio.unwrap()), "106x");
}

#[test]
fn attention_free_and_attention_models_both_evaluate() {
    for attention in [AttentionKind::None, AttentionKind::SingleHead] {
        let model = ReplacementModel::build(ModelConfig {
            num_layers: 2,
            d_model: 8,
            vocab_size: 32,
            features_per_layer: 16,
            activation: Activation::Relu,
            attention,
            seed: 2,
            target_density: 0.1,
            ..ModelConfig::default()
        })
        .unwrap();
        let res = run_budget_sweep(&model, &prompts(3), &Method::ALL, &[2, 5], &SweepConfig::default()).unwrap();
        for r in &res.reports {
            assert!(r.aggregate.mean_kl.is_finite() && r.aggregate.mean_kl >= 0.0);
        }
    }
}
