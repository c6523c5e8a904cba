// SPDX-License-Identifier: MIT OR Apache-2.0

//! Behavioural fidelity of pruned circuits, budget sweeps, the random-active
//! compression curve, and the interpretation cost model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    derive_seed, score, select_random_active, select_topk, stats, AttributionOptions, Circuit,
    Method, PromptContext, ScoreRecord, ScoreTable,
};
use crate::error::{PieError, Result};
use crate::model::{kl_divergence, Metric, MetricKind, ReplacementModel};
use crate::occurrence::FeatureOccurrence;
use crate::synergy::{select_synergy, AuditRecord, SynergyConfig};
use crate::tasks::TaskDataset;

/// Below this `|L(M) - L(empty)|` a pair carries no faithfulness signal.
pub const DEGENERACY_FLOOR: f64 = 1e-9;

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Anchors of one pair that every circuit evaluation reuses.
#[derive(Debug, Clone)]
pub struct PromptEvaluator<'m> {
    pub ctx: PromptContext<'m>,
    subject: Vec<f64>,
    metric: Metric,
    full_metric: f64,
    empty_metric: f64,
}

impl<'m> PromptEvaluator<'m> {
    pub fn new(ctx: PromptContext<'m>) -> Result<Self> {
        let metric = ctx.metric(MetricKind::LogitDifference)?;
        let subject = ctx.clean.last_distribution();
        let full_metric = metric.evaluate(&ctx.clean);
        let empty_metric = metric.evaluate(&ctx.restricted(&BTreeSet::new())?);
        Ok(Self {
            ctx,
            subject,
            metric,
            full_metric,
            empty_metric,
        })
    }

    /// `L(M)`: logit difference of the full clean run.
    pub fn full_metric(&self) -> f64 {
        self.full_metric
    }

    /// `L(empty)`: logit difference with every occurrence frozen to corrupted.
    pub fn empty_metric(&self) -> f64 {
        self.empty_metric
    }

    pub fn is_degenerate(&self) -> bool {
        (self.full_metric - self.empty_metric).abs() < DEGENERACY_FLOOR
    }

    pub fn evaluate(&self, retained: &BTreeSet<FeatureOccurrence>) -> Result<PromptFidelity> {
        let run = self.ctx.restricted(retained)?;
        let q = run.last_distribution();
        let faithfulness = if self.is_degenerate() {
            None
        } else {
            let lc = self.metric.evaluate(&run);
            Some((lc - self.empty_metric) / (self.full_metric - self.empty_metric))
        };
        Ok(PromptFidelity {
            prompt_id: self.ctx.id().to_string(),
            kl: kl_divergence(&self.subject, &q),
            faithfulness,
            prediction_changed: argmax(&self.subject) != argmax(&q),
        })
    }
}

/// Last-token `KL(subject || restricted)` in nats.
pub fn eval_kl(ctx: &PromptContext<'_>, retained: &BTreeSet<FeatureOccurrence>) -> Result<f64> {
    let q = ctx.restricted(retained)?.last_distribution();
    Ok(kl_divergence(&ctx.clean.last_distribution(), &q))
}

/// `(L(C) - L(empty)) / (L(M) - L(empty))` with logit difference.
pub fn eval_faithfulness(ctx: &PromptContext<'_>, retained: &BTreeSet<FeatureOccurrence>) -> Result<f64> {
    let eval = PromptEvaluator::new(ctx.clone())?;
    eval.evaluate(retained)?
        .faithfulness
        .ok_or_else(|| PieError::DegeneratePair(ctx.id().to_string()))
}

/// Whether the last-token argmax of the restricted run differs from the
/// subject's.
pub fn eval_prediction_change(ctx: &PromptContext<'_>, retained: &BTreeSet<FeatureOccurrence>) -> Result<bool> {
    let q = ctx.restricted(retained)?.last_distribution();
    Ok(argmax(&ctx.clean.last_distribution()) != argmax(&q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFidelity {
    pub prompt_id: String,
    pub kl: f64,
    /// `None` for degenerate pairs.
    pub faithfulness: Option<f64>,
    pub prediction_changed: bool,
}

/// Mean and sample standard deviation over prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_kl: f64,
    pub std_kl: f64,
    pub mean_faith: f64,
    pub std_faith: f64,
    /// Fraction of prompts whose prediction changed.
    pub pcr: f64,
    pub n_prompts: usize,
    /// Prompts excluded from the faithfulness aggregate.
    pub n_degenerate: usize,
}

impl Aggregate {
    pub fn from_prompts(rows: &[PromptFidelity]) -> Self {
        let kls: Vec<f64> = rows.iter().map(|r| r.kl).collect();
        let faiths: Vec<f64> = rows.iter().filter_map(|r| r.faithfulness).collect();
        let (mean_kl, std_kl) = stats::mean_std(&kls);
        let (mean_faith, std_faith) = stats::mean_std(&faiths);
        let changed = rows.iter().filter(|r| r.prediction_changed).count();
        Self {
            mean_kl,
            std_kl,
            mean_faith,
            std_faith,
            pcr: if rows.is_empty() { f64::NAN } else { changed as f64 / rows.len() as f64 },
            n_prompts: rows.len(),
            n_degenerate: rows.len() - faiths.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub method: Method,
    pub k: usize,
    pub prompts: Vec<PromptFidelity>,
    pub aggregate: Aggregate,
}

/// Everything the prune and evaluate stages need besides the model and data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub attribution: AttributionOptions,
    pub synergy: SynergyConfig,
    /// Seed of random-active selection.
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            attribution: AttributionOptions::default(),
            synergy: SynergyConfig::default(),
            seed: 0,
        }
    }
}

/// Budgets must be positive, strictly increasing, and non-empty.
pub fn validate_budgets(budgets: &[usize]) -> Result<()> {
    if budgets.is_empty() {
        return Err(PieError::Config("budgets: at least one budget is required".into()));
    }
    if budgets.contains(&0) {
        return Err(PieError::Config("budgets: every budget must be >= 1".into()));
    }
    if budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PieError::Config("budgets: must be sorted ascending without repeats".into()));
    }
    Ok(())
}

fn validate_methods(methods: &[Method]) -> Result<()> {
    if methods.is_empty() {
        return Err(PieError::Config("methods: at least one method is required".into()));
    }
    let unique: BTreeSet<_> = methods.iter().collect();
    if unique.len() != methods.len() {
        return Err(PieError::Config("methods: duplicate method".into()));
    }
    Ok(())
}

/// Circuits, scores and audits of one prompt for every (method, K).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPruning {
    pub prompt_id: String,
    pub scores: Vec<ScoreTable>,
    /// In `(method, K)` order.
    pub circuits: Vec<Circuit>,
    pub audit: Vec<AuditRecord>,
}

/// Scores one prompt under every method and selects a circuit per budget.
pub fn prune_prompt(
    ctx: &PromptContext<'_>,
    methods: &[Method],
    budgets: &[usize],
    config: &SweepConfig,
) -> Result<PromptPruning> {
    let mut tables: BTreeMap<Method, ScoreTable> = BTreeMap::new();
    let mut circuits = Vec::new();
    let mut audit = Vec::new();
    for &method in methods {
        if method != Method::RandomActive && !tables.contains_key(&method) {
            tables.insert(method, score(ctx, method, &config.attribution)?);
        }
        for &k in budgets {
            let circuit = match method {
                Method::RandomActive => {
                    select_random_active(ctx, k, derive_seed(config.seed, &format!("{}/{k}", ctx.id())))?
                }
                Method::FapSynergy => {
                    let metric = ctx.metric(config.attribution.metric)?;
                    let sel = select_synergy(ctx, &tables[&method], k, &config.synergy, &metric)?;
                    audit.extend(sel.audit);
                    sel.circuit
                }
                _ => select_topk(&tables[&method], k)?,
            };
            circuits.push(circuit);
        }
    }
    Ok(PromptPruning {
        prompt_id: ctx.id().to_string(),
        scores: methods.iter().filter_map(|m| tables.get(m).cloned()).collect(),
        circuits,
        audit,
    })
}

/// Prunes every prompt of `dataset` in parallel; output order follows the
/// dataset.
pub fn prune_dataset(
    model: &ReplacementModel,
    dataset: &TaskDataset,
    methods: &[Method],
    budgets: &[usize],
    config: &SweepConfig,
) -> Result<Vec<PromptPruning>> {
    validate_methods(methods)?;
    validate_budgets(budgets)?;
    config.synergy.validate()?;
    dataset
        .pairs
        .par_iter()
        .map(|pair| prune_prompt(&PromptContext::new(model, pair)?, methods, budgets, config))
        .collect()
}

/// Evaluates each circuit against its prompt. Circuits naming a prompt id
/// absent from the dataset are reported together as one error.
pub fn evaluate_circuits(
    model: &ReplacementModel,
    dataset: &TaskDataset,
    circuits: &[Circuit],
) -> Result<Vec<FidelityReport>> {
    let missing: BTreeSet<&str> = circuits
        .iter()
        .map(|c| c.prompt_id.as_str())
        .filter(|id| dataset.get(id).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(PieError::Argument(format!(
            "circuits reference prompts missing from the dataset: {}",
            missing.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let used: BTreeSet<&str> = circuits.iter().map(|c| c.prompt_id.as_str()).collect();
    let evaluators: BTreeMap<String, PromptEvaluator<'_>> = dataset
        .pairs
        .par_iter()
        .filter(|p| used.contains(p.id.as_str()))
        .map(|p| Ok((p.id.clone(), PromptEvaluator::new(PromptContext::new(model, p)?)?)))
        .collect::<Result<_>>()?;

    let rows: Vec<PromptFidelity> = circuits
        .par_iter()
        .map(|c| evaluators[&c.prompt_id].evaluate(&c.occurrence_set()))
        .collect::<Result<_>>()?;

    // group by (method, K) in first-seen order, prompts in circuit order
    let mut groups: Vec<((Method, usize), Vec<PromptFidelity>)> = Vec::new();
    for (c, row) in circuits.iter().zip(rows) {
        let key = (c.method, c.k);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(row),
            None => groups.push((key, vec![row])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|((method, k), prompts)| FidelityReport {
            method,
            k,
            aggregate: Aggregate::from_prompts(&prompts),
            prompts,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub reports: Vec<FidelityReport>,
    pub pruning: Vec<PromptPruning>,
}

impl SweepResult {
    pub fn report(&self, method: Method, k: usize) -> Option<&FidelityReport> {
        self.reports.iter().find(|r| r.method == method && r.k == k)
    }

    pub fn circuits(&self) -> impl Iterator<Item = &Circuit> {
        self.pruning.iter().flat_map(|p| p.circuits.iter())
    }

    pub fn score_records(&self) -> Vec<ScoreRecord> {
        self.pruning
            .iter()
            .flat_map(|p| p.scores.iter().flat_map(|t| t.records()))
            .collect()
    }

    pub fn audit(&self) -> impl Iterator<Item = &AuditRecord> {
        self.pruning.iter().flat_map(|p| p.audit.iter())
    }
}

/// Prune then evaluate over the full `(method, K)` grid. Reports come out in
/// `methods x budgets` order.
pub fn run_budget_sweep(
    model: &ReplacementModel,
    dataset: &TaskDataset,
    methods: &[Method],
    budgets: &[usize],
    config: &SweepConfig,
) -> Result<SweepResult> {
    let pruning = prune_dataset(model, dataset, methods, budgets, config)?;
    // regroup so that each (method, K) block lists prompts in dataset order
    let mut ordered = Vec::new();
    for (mi, _) in methods.iter().enumerate() {
        for (ki, _) in budgets.iter().enumerate() {
            for p in &pruning {
                ordered.push(p.circuits[mi * budgets.len() + ki].clone());
            }
        }
    }
    let reports = evaluate_circuits(model, dataset, &ordered)?;
    Ok(SweepResult { reports, pruning })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub mean_kl: f64,
    /// Spread of the per-seed dataset means.
    pub std_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionCurve {
    pub k_ref: usize,
    pub fap_mean_kl: f64,
    pub fap_std_kl: f64,
    pub points: Vec<CurvePoint>,
    /// First random budget whose mean KL is at or below FAP at `k_ref`.
    pub k_cross: Option<usize>,
    pub seeds: usize,
}

impl CompressionCurve {
    pub fn crossover_ratio(&self) -> Option<f64> {
        self.k_cross.map(|k| k as f64 / self.k_ref as f64)
    }
}

/// Mean KL of random-active circuits at each budget, averaged over
/// `n_seeds` seeds, against FAP at `k_ref`.
pub fn run_compression_curve(
    model: &ReplacementModel,
    dataset: &TaskDataset,
    k_ref: usize,
    random_budgets: &[usize],
    n_seeds: usize,
    seed: u64,
    attribution: &AttributionOptions,
) -> Result<CompressionCurve> {
    validate_budgets(random_budgets)?;
    if n_seeds == 0 {
        return Err(PieError::Config("compression curve needs at least one seed".into()));
    }
    let per_prompt: Vec<(f64, Vec<Vec<f64>>)> = dataset
        .pairs
        .par_iter()
        .map(|pair| {
            let ctx = PromptContext::new(model, pair)?;
            let fap = select_topk(&score(&ctx, Method::Fap, attribution)?, k_ref)?;
            let fap_kl = eval_kl(&ctx, &fap.occurrence_set())?;
            let grid = random_budgets
                .iter()
                .map(|&k| {
                    (0..n_seeds)
                        .map(|s| {
                            let sd = derive_seed(seed, &format!("{}/{k}/{s}", pair.id));
                            eval_kl(&ctx, &select_random_active(&ctx, k, sd)?.occurrence_set())
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((fap_kl, grid))
        })
        .collect::<Result<_>>()?;

    let fap: Vec<f64> = per_prompt.iter().map(|p| p.0).collect();
    let (fap_mean_kl, fap_std_kl) = stats::mean_std(&fap);
    let n = per_prompt.len() as f64;
    let points: Vec<CurvePoint> = random_budgets
        .iter()
        .enumerate()
        .map(|(ki, &k)| {
            let seed_means: Vec<f64> = (0..n_seeds)
                .map(|s| per_prompt.iter().map(|p| p.1[ki][s]).sum::<f64>() / n)
                .collect();
            let (mean_kl, std_kl) = stats::mean_std(&seed_means);
            CurvePoint { k, mean_kl, std_kl }
        })
        .collect();
    let k_cross = points.iter().find(|p| p.mean_kl <= fap_mean_kl).map(|p| p.k);
    Ok(CompressionCurve {
        k_ref,
        fap_mean_kl,
        fap_std_kl,
        points,
        k_cross,
        seeds: n_seeds,
    })
}

/// One cell of a lambda/bp grid, as deltas against the lambda = 0 baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda: f64,
    pub boundary_percent: f64,
    pub mean_kl: f64,
    pub std_kl: f64,
    /// `1000 * (mean_kl - baseline mean_kl)`.
    pub delta_mean_mkl: f64,
    pub delta_std_mkl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSweep {
    pub k: usize,
    pub baseline_mean_kl: f64,
    pub baseline_std_kl: f64,
    /// Lambda-major, in grid order.
    pub cells: Vec<GridCell>,
    /// Index of the lowest mean KL; ties keep the first cell.
    pub argmin: usize,
}

impl GridSweep {
    pub fn best(&self) -> &GridCell {
        &self.cells[self.argmin]
    }
}

/// Mean last-token KL of FAP-Synergy at budget `k` over every `(lambda, bp)`
/// pair, with deltas against plain FAP (lambda = 0).
pub fn run_synergy_grid(
    model: &ReplacementModel,
    dataset: &TaskDataset,
    k: usize,
    lambdas: &[f64],
    percents: &[f64],
    base: &SweepConfig,
) -> Result<GridSweep> {
    if lambdas.is_empty() || percents.is_empty() {
        return Err(PieError::Config("sweep grid: lambda and bp lists must be non-empty".into()));
    }
    let cells_cfg: Vec<SynergyConfig> = lambdas
        .iter()
        .flat_map(|&lambda| {
            percents.iter().map(move |&boundary_percent| SynergyConfig {
                lambda,
                boundary_percent,
                ..base.synergy
            })
        })
        .collect();
    for c in &cells_cfg {
        c.validate()?;
    }
    let per_prompt: Vec<(f64, Vec<f64>)> = dataset
        .pairs
        .par_iter()
        .map(|pair| {
            let eval = PromptEvaluator::new(PromptContext::new(model, pair)?)?;
            let ctx = &eval.ctx;
            let fap = score(ctx, Method::Fap, &base.attribution)?;
            let metric = ctx.metric(base.attribution.metric)?;
            let baseline = eval.evaluate(&select_topk(&fap, k)?.occurrence_set())?.kl;
            let cells = cells_cfg
                .iter()
                .map(|cfg| {
                    let sel = select_synergy(ctx, &fap, k, cfg, &metric)?;
                    Ok(eval.evaluate(&sel.circuit.occurrence_set())?.kl)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((baseline, cells))
        })
        .collect::<Result<_>>()?;

    let base_kls: Vec<f64> = per_prompt.iter().map(|p| p.0).collect();
    let (baseline_mean_kl, baseline_std_kl) = stats::mean_std(&base_kls);
    let cells: Vec<GridCell> = cells_cfg
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let kls: Vec<f64> = per_prompt.iter().map(|p| p.1[i]).collect();
            let (mean_kl, std_kl) = stats::mean_std(&kls);
            GridCell {
                lambda: cfg.lambda,
                boundary_percent: cfg.boundary_percent,
                mean_kl,
                std_kl,
                delta_mean_mkl: 1000.0 * (mean_kl - baseline_mean_kl),
                delta_std_mkl: 1000.0 * (std_kl - baseline_std_kl),
            }
        })
        .collect();
    let argmin = cells
        .iter()
        .enumerate()
        .fold(0, |best, (i, c)| if c.mean_kl < cells[best].mean_kl { i } else { best });
    Ok(GridSweep {
        k,
        baseline_mean_kl,
        baseline_std_kl,
        cells,
        argmin,
    })
}

/// Whole-dollar amount held as integer micro-dollars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Micros(pub u64);

impl Micros {
    /// Parses a per-unit price, rounding to the nearest micro-dollar.
    pub fn from_dollars(dollars: f64) -> Result<Self> {
        if !(dollars >= 0.0 && dollars.is_finite()) {
            return Err(PieError::Config(format!("price must be a finite non-negative amount, got {dollars}")));
        }
        Ok(Self((dollars * 1e6).round() as u64))
    }

    /// Cents, rounded half-up.
    pub fn cents(self) -> u64 {
        (self.0 + 5_000) / 10_000
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / 1e6
    }
}

impl fmt::Display for Micros {
    /// Dollars with two decimals and thousands separators, half-up.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cents = self.cents();
        let whole = (cents / 100).to_string();
        let mut grouped = String::new();
        for (i, ch) in whole.chars().enumerate() {
            if i > 0 && (whole.len() - i) % 3 == 0 {
                grouped.push(',');
            }
            grouped.push(ch);
        }
        write!(f, "${grouped}.{:02}", cents % 100)
    }
}

/// A count of features and what interpreting them costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostLine {
    pub count: u64,
    pub total: Micros,
}

/// Half-up rounding at `decimals` places, as reported in cost tables:
/// one decimal below 100x, whole numbers above.
pub fn report_ratio(ratio: f64) -> String {
    if ratio >= 100.0 {
        format!("{}x", (ratio + 0.5).floor())
    } else {
        format!("{:.1}x", (ratio * 10.0 + 0.5).floor() / 10.0)
    }
}

/// Inputs of the cost model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostCounts {
    /// Unique features kept across the dataset.
    pub unique_kept: u64,
    /// Features active on one prompt, the per-prompt alternative.
    pub active_per_prompt: Option<u64>,
    /// Per-prompt occurrence budget `K`.
    pub per_prompt_budget: Option<u64>,
    /// Full dictionary size, the global alternative.
    pub dictionary: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub c_feat: Micros,
    pub unique_kept: CostLine,
    pub active_per_prompt: Option<CostLine>,
    pub per_prompt_budget: Option<CostLine>,
    pub dictionary: Option<CostLine>,
    /// `active_per_prompt / per_prompt_budget`.
    pub per_prompt_ratio: Option<f64>,
    /// `dictionary / unique_kept`.
    pub global_ratio: Option<f64>,
    /// `dictionary cost - kept cost`.
    pub global_savings: Option<Micros>,
}

/// Totals are exact integer products `count * c_feat` in micro-dollars.
pub fn estimate_cost(counts: &CostCounts, c_feat: f64) -> Result<CostEstimate> {
    let price = Micros::from_dollars(c_feat)?;
    let line = |count: u64| -> Result<CostLine> {
        let total = count
            .checked_mul(price.0)
            .ok_or_else(|| PieError::Config(format!("cost of {count} features overflows")))?;
        Ok(CostLine {
            count,
            total: Micros(total),
        })
    };
    let ratio = |num: Option<u64>, den: Option<u64>| match (num, den) {
        (Some(n), Some(d)) if d > 0 => Some(n as f64 / d as f64),
        _ => None,
    };
    let unique_kept = line(counts.unique_kept)?;
    let dictionary = counts.dictionary.map(line).transpose()?;
    Ok(CostEstimate {
        c_feat: price,
        unique_kept,
        active_per_prompt: counts.active_per_prompt.map(line).transpose()?,
        per_prompt_budget: counts.per_prompt_budget.map(line).transpose()?,
        per_prompt_ratio: ratio(counts.active_per_prompt, counts.per_prompt_budget),
        global_ratio: ratio(counts.dictionary, Some(counts.unique_kept)),
        global_savings: dictionary.map(|d| Micros(d.total.0.saturating_sub(unique_kept.total.0))),
        dictionary,
    })
}
