// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-occurrence importance scores and budgeted circuit selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PieError, Result};
use crate::model::{
    ErrorMode, ForwardOptions, GradientRun, Metric, MetricKind, PatchAction, PatchSpec,
    PropagationRule, ReplacementModel, RunTrace,
};
use crate::occurrence::{FeatureId, FeatureOccurrence};
use crate::tasks::PromptPair;

/// Default stabiliser of the LRP epsilon rule.
pub const DEFAULT_LRP_EPSILON: f64 = 1e-6;

/// Pruning methods, by their command-line tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fap")]
    Fap,
    #[serde(rename = "fap-synergy")]
    FapSynergy,
    #[serde(rename = "act-mag")]
    ActivationMagnitude,
    #[serde(rename = "factp")]
    Factp,
    #[serde(rename = "relp")]
    Relp,
    #[serde(rename = "random-active")]
    RandomActive,
}

impl Method {
    /// The five scoring methods, in report order.
    pub const ALL: [Method; 5] = [
        Method::Fap,
        Method::FapSynergy,
        Method::ActivationMagnitude,
        Method::Factp,
        Method::Relp,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Fap => "fap",
            Self::FapSynergy => "fap-synergy",
            Self::ActivationMagnitude => "act-mag",
            Self::Factp => "factp",
            Self::Relp => "relp",
            Self::RandomActive => "random-active",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = PieError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fap" => Ok(Self::Fap),
            "fap-synergy" | "fap_synergy" => Ok(Self::FapSynergy),
            "act-mag" | "activation-magnitude" | "act_mag" => Ok(Self::ActivationMagnitude),
            "factp" => Ok(Self::Factp),
            "relp" => Ok(Self::Relp),
            "random-active" | "random" => Ok(Self::RandomActive),
            other => Err(PieError::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Knobs shared by the gradient-style scorers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionOptions {
    pub metric: MetricKind,
    pub gradient_run: GradientRun,
    pub lrp_epsilon: f64,
}

impl Default for AttributionOptions {
    fn default() -> Self {
        Self {
            metric: MetricKind::LogitDifference,
            gradient_run: GradientRun::Clean,
            lrp_epsilon: DEFAULT_LRP_EPSILON,
        }
    }
}

/// Clean and corrupted traces of one pair, plus the patched-run helpers every
/// scorer and evaluator goes through.
///
/// In frozen-error mode each patched run reuses the error terms of the
/// unpatched run on the same tokens.
#[derive(Debug, Clone)]
pub struct PromptContext<'m> {
    pub model: &'m ReplacementModel,
    pub pair: PromptPair,
    pub clean: RunTrace,
    pub corrupted: RunTrace,
}

impl<'m> PromptContext<'m> {
    pub fn new(model: &'m ReplacementModel, pair: &PromptPair) -> Result<Self> {
        pair.validate()?;
        let clean = model.forward(&pair.clean, None, None)?;
        let corrupted = model.forward(&pair.corrupted, None, None)?;
        Ok(Self {
            model,
            pair: pair.clone(),
            clean,
            corrupted,
        })
    }

    pub fn id(&self) -> &str {
        &self.pair.id
    }

    /// Clean tokens, freeze actions reading the corrupted trace.
    pub fn run_clean(&self, patch: &PatchSpec) -> Result<RunTrace> {
        let frozen = (self.model.config().error_mode == ErrorMode::FrozenError)
            .then(|| self.clean.error_terms());
        self.model.forward_with(
            &self.pair.clean,
            &ForwardOptions {
                patch: Some(patch),
                reference: Some(&self.corrupted),
                frozen_errors: frozen,
                ..ForwardOptions::default()
            },
        )
    }

    /// Corrupted tokens, freeze actions reading the clean trace.
    pub fn run_corrupted(&self, patch: &PatchSpec) -> Result<RunTrace> {
        let frozen = (self.model.config().error_mode == ErrorMode::FrozenError)
            .then(|| self.corrupted.error_terms());
        self.model.forward_with(
            &self.pair.corrupted,
            &ForwardOptions {
                patch: Some(patch),
                reference: Some(&self.clean),
                frozen_errors: frozen,
                ..ForwardOptions::default()
            },
        )
    }

    /// Occurrences active in the clean or the corrupted run, sorted.
    pub fn scoreable(&self) -> Vec<FeatureOccurrence> {
        let set: BTreeSet<_> = self
            .clean
            .active_occurrences()
            .into_iter()
            .chain(self.corrupted.active_occurrences())
            .collect();
        set.into_iter().collect()
    }

    /// Clean run with every occurrence outside `retained` frozen to its
    /// corrupted value. Retained occurrences are recomputed live.
    pub fn restricted(&self, retained: &BTreeSet<FeatureOccurrence>) -> Result<RunTrace> {
        let mut patch = PatchSpec::new();
        for layer in 0..self.model.num_layers() {
            for feature in 0..self.model.features_per_layer() {
                for position in 0..self.pair.len() {
                    let occ = FeatureOccurrence::new(layer, feature, position);
                    if !retained.contains(&occ) {
                        patch.insert(occ, PatchAction::FreezeToCorrupted);
                    }
                }
            }
        }
        self.run_clean(&patch)
    }

    /// Resolves `kind` for this pair. Negative KL is taken against the clean
    /// subject distribution.
    pub fn metric(&self, kind: MetricKind) -> Result<Metric> {
        let reference = self.clean.last_distribution();
        Metric::from_kind(kind, Some(self.pair.answer()), Some(&reference))
    }

    /// Metric change from freezing one occurrence of the clean run to its
    /// corrupted value: `M(clean) - M(clean, occ frozen)`.
    pub fn patch_effect(&self, metric: &Metric, occ: FeatureOccurrence) -> Result<f64> {
        let patch = PatchSpec::uniform([occ], PatchAction::FreezeToCorrupted);
        Ok(metric.evaluate(&self.clean) - metric.evaluate(&self.run_clean(&patch)?))
    }
}

/// Scores of one method on one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub prompt_id: String,
    pub method: Method,
    pub metric: Option<MetricKind>,
    pub gradient_run: Option<GradientRun>,
    pub scores: BTreeMap<FeatureOccurrence, f64>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, occ: &FeatureOccurrence) -> Option<f64> {
        self.scores.get(occ).copied()
    }

    pub fn nonzero_count(&self) -> usize {
        self.scores.values().filter(|s| **s != 0.0).count()
    }

    /// Occurrences by `|score|` descending, ties by `(layer, feature,
    /// position)` ascending.
    pub fn ranked(&self) -> Vec<(FeatureOccurrence, f64)> {
        let mut out: Vec<_> = self.scores.iter().map(|(o, s)| (*o, *s)).collect();
        out.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
        out
    }

    /// Every score multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            scores: self.scores.iter().map(|(o, s)| (*o, s * factor)).collect(),
            ..self.clone()
        }
    }

    /// One JSON record per occurrence.
    pub fn records(&self) -> Vec<ScoreRecord> {
        self.scores
            .iter()
            .map(|(occ, score)| ScoreRecord {
                prompt_id: self.prompt_id.clone(),
                method: self.method,
                occurrence: *occ,
                score: *score,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub prompt_id: String,
    pub method: Method,
    #[serde(flatten)]
    pub occurrence: FeatureOccurrence,
    pub score: f64,
}

fn check_finite(table: ScoreTable) -> Result<ScoreTable> {
    if let Some((occ, s)) = table.scores.iter().find(|(_, s)| !s.is_finite()) {
        return Err(PieError::Shape(format!(
            "{} produced a non-finite score {s} for {occ} on `{}`",
            table.method, table.prompt_id
        )));
    }
    Ok(table)
}

fn write_weighted(
    ctx: &PromptContext<'_>,
    method: Method,
    opts: &AttributionOptions,
    rule: PropagationRule,
) -> Result<ScoreTable> {
    let metric = ctx.metric(opts.metric)?;
    let run = match opts.gradient_run {
        GradientRun::Clean => &ctx.clean,
        GradientRun::Corrupted => &ctx.corrupted,
    };
    let cache = ctx.model.propagate(run, &metric, rule)?.with_run(opts.gradient_run);
    let sensitivity: Vec<Array2<f64>> = (0..ctx.model.num_layers())
        .map(|l| ctx.model.write_sensitivity(&cache, l))
        .collect();
    let scores = ctx
        .scoreable()
        .into_iter()
        .map(|occ| {
            let delta = ctx.clean.activation(occ) - ctx.corrupted.activation(occ);
            let s = if delta == 0.0 {
                0.0
            } else {
                delta * sensitivity[occ.layer][[occ.position, occ.feature]]
            };
            (occ, s)
        })
        .collect();
    check_finite(ScoreTable {
        prompt_id: ctx.id().to_string(),
        method,
        metric: Some(opts.metric),
        gradient_run: Some(opts.gradient_run),
        scores,
    })
}

/// First-order write attribution: `delta_a * sum_s D^{l->s}_f . grad h_s(t)`.
pub fn score_fap(ctx: &PromptContext<'_>, opts: &AttributionOptions) -> Result<ScoreTable> {
    write_weighted(ctx, Method::Fap, opts, PropagationRule::Gradient)
}

/// Same aggregation as FAP with LRP epsilon-rule coefficients in place of
/// gradients.
pub fn score_relp(ctx: &PromptContext<'_>, opts: &AttributionOptions) -> Result<ScoreTable> {
    write_weighted(
        ctx,
        Method::Relp,
        opts,
        PropagationRule::LrpEpsilon {
            epsilon: opts.lrp_epsilon,
        },
    )
}

/// `|a_f(clean, t)|`.
pub fn score_activation_magnitude(ctx: &PromptContext<'_>) -> Result<ScoreTable> {
    let scores = ctx
        .scoreable()
        .into_iter()
        .map(|occ| (occ, ctx.clean.activation(occ).abs()))
        .collect();
    check_finite(ScoreTable {
        prompt_id: ctx.id().to_string(),
        method: Method::ActivationMagnitude,
        metric: None,
        gradient_run: None,
        scores,
    })
}

/// Exact single-occurrence patch effect; one patched forward per occurrence
/// with a nonzero activation difference.
pub fn score_factp(ctx: &PromptContext<'_>, metric_kind: MetricKind) -> Result<ScoreTable> {
    let metric = ctx.metric(metric_kind)?;
    let scores = ctx
        .scoreable()
        .into_par_iter()
        .map(|occ| {
            if ctx.clean.activation(occ) == ctx.corrupted.activation(occ) {
                Ok((occ, 0.0))
            } else {
                Ok((occ, ctx.patch_effect(&metric, occ)?))
            }
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    check_finite(ScoreTable {
        prompt_id: ctx.id().to_string(),
        method: Method::Factp,
        metric: Some(metric_kind),
        gradient_run: None,
        scores,
    })
}

/// Scores for any method that ranks occurrences directly. FAP-Synergy scores
/// are FAP scores; the rerank happens at selection time.
pub fn score(ctx: &PromptContext<'_>, method: Method, opts: &AttributionOptions) -> Result<ScoreTable> {
    match method {
        Method::Fap | Method::FapSynergy => {
            let mut table = score_fap(ctx, opts)?;
            table.method = method;
            Ok(table)
        }
        Method::ActivationMagnitude => score_activation_magnitude(ctx),
        Method::Factp => score_factp(ctx, opts.metric),
        Method::Relp => score_relp(ctx, opts),
        Method::RandomActive => Err(PieError::Config(
            "random-active selection has no scores; use select_random_active".into(),
        )),
    }
}

/// LRP epsilon rule through a bias-free linear map `z = x W`: input
/// relevance `R_i = sum_j x_i W_ij / (z_j + eps sign z_j) R_j`.
pub fn lrp_epsilon_linear(
    input: &Array1<f64>,
    weights: &Array2<f64>,
    relevance_out: &Array1<f64>,
    epsilon: f64,
) -> Result<Array1<f64>> {
    if !(epsilon > 0.0) {
        return Err(PieError::Config(format!("LRP epsilon must be > 0, got {epsilon}")));
    }
    if weights.nrows() != input.len() || weights.ncols() != relevance_out.len() {
        return Err(PieError::Shape(format!(
            "weights {:?} do not map {} inputs to {} outputs",
            weights.dim(),
            input.len(),
            relevance_out.len()
        )));
    }
    let z = input.dot(weights);
    let ratio = Array1::from_iter(z.iter().zip(relevance_out).map(|(&z, &r)| {
        let stab = if z >= 0.0 { z + epsilon } else { z - epsilon };
        r / stab
    }));
    Ok(input * &weights.dot(&ratio))
}

/// A budgeted set of retained occurrences for one prompt, in rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub prompt_id: String,
    pub method: Method,
    pub k: usize,
    #[serde(rename = "occurrences")]
    pub retained: Vec<RetainedOccurrence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetainedOccurrence {
    #[serde(flatten)]
    pub occurrence: FeatureOccurrence,
    pub score: f64,
}

impl Circuit {
    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn occurrence_set(&self) -> BTreeSet<FeatureOccurrence> {
        self.retained.iter().map(|r| r.occurrence).collect()
    }

    pub fn contains(&self, occ: &FeatureOccurrence) -> bool {
        self.retained.iter().any(|r| r.occurrence == *occ)
    }
}

fn check_budget(k: usize) -> Result<()> {
    if k == 0 {
        return Err(PieError::Argument("budget K must be at least 1".into()));
    }
    Ok(())
}

/// The `min(K, available)` occurrences with the largest `|score|`.
pub fn select_topk(scores: &ScoreTable, k: usize) -> Result<Circuit> {
    check_budget(k)?;
    Ok(Circuit {
        prompt_id: scores.prompt_id.clone(),
        method: scores.method,
        k,
        retained: scores
            .ranked()
            .into_iter()
            .take(k)
            .map(|(occurrence, score)| RetainedOccurrence { occurrence, score })
            .collect(),
    })
}

/// Uniform sample without replacement from the scoreable occurrences.
///
/// The pool is the same clean-or-corrupted universe the scorers rank, so the
/// sample at `K = |pool|` is the full circuit.
pub fn select_random_active(ctx: &PromptContext<'_>, k: usize, seed: u64) -> Result<Circuit> {
    check_budget(k)?;
    let pool = ctx.scoreable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<FeatureOccurrence> = pool.choose_multiple(&mut rng, k.min(pool.len())).copied().collect();
    picked.sort();
    Ok(Circuit {
        prompt_id: ctx.id().to_string(),
        method: Method::RandomActive,
        k,
        retained: picked
            .into_iter()
            .map(|occurrence| RetainedOccurrence { occurrence, score: 0.0 })
            .collect(),
    })
}

/// Dataset-level union of retained features with per-feature occurrence
/// counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniqueFeatureSet {
    pub counts: BTreeMap<FeatureId, usize>,
}

impl UniqueFeatureSet {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn features(&self) -> impl Iterator<Item = FeatureId> + '_ {
        self.counts.keys().copied()
    }

    pub fn add(&mut self, circuit: &Circuit) {
        for r in &circuit.retained {
            *self.counts.entry(r.occurrence.feature_id()).or_insert(0) += 1;
        }
    }
}

pub fn unique_union<'a>(circuits: impl IntoIterator<Item = &'a Circuit>) -> UniqueFeatureSet {
    let mut set = UniqueFeatureSet::default();
    for c in circuits {
        set.add(c);
    }
    set
}

/// Deterministic per-item seed derived from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub mod stats {
    //! Small order statistics used by the rerank and the reports.

    /// Median with the even-length midpoint convention; `None` when empty.
    pub fn median(values: &[f64]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        })
    }

    /// Mean and sample standard deviation (0 for a single value).
    pub fn mean_std(values: &[f64]) -> (f64, f64) {
        let n = values.len();
        if n == 0 {
            return (f64::NAN, f64::NAN);
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return (mean, 0.0);
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (mean, var.sqrt())
    }

    /// 1-based ranks with ties sharing their average rank.
    pub fn average_ranks(values: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let mut ranks = vec![0.0; values.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    }

    /// Spearman correlation: Pearson on average ranks. `None` if either side
    /// is constant or the lengths differ.
    pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
        if a.len() != b.len() || a.len() < 2 {
            return None;
        }
        let (ra, rb) = (average_ranks(a), average_ranks(b));
        let (ma, _) = mean_std(&ra);
        let (mb, _) = mean_std(&rb);
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
        if va == 0.0 || vb == 0.0 {
            return None;
        }
        Some(cov / (va * vb).sqrt())
    }
}
