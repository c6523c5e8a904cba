// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exemplar extraction, explainer/auditor clients and description-quality
//! metrics for the features kept by pruning.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attribution::{derive_seed, UniqueFeatureSet};
use crate::error::{PieError, Result};
use crate::model::{ReplacementModel, TokenId};
use crate::occurrence::FeatureId;

pub const DEFAULT_EXEMPLAR_LIMIT: usize = 40;
pub const DEFAULT_HIGHLIGHT_THRESHOLD: f64 = 0.65;
pub const DEFAULT_HIGH_QUANTILE: f64 = 0.25;
pub const DEFAULT_SYNTHETIC_PER_CLASS: usize = 15;
pub const DEFAULT_N_EVAL: usize = 250;

/// Per-layer `T x F` activations of every corpus sequence, computed once.
#[derive(Debug, Clone)]
pub struct CorpusCache {
    sequences: Vec<Vec<TokenId>>,
    activations: Vec<Vec<Array2<f64>>>,
    num_layers: usize,
    features_per_layer: usize,
}

impl CorpusCache {
    pub fn new(model: &ReplacementModel, corpus: &[Vec<TokenId>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(PieError::Argument("corpus is empty".into()));
        }
        let cfg = model.config();
        let activations = corpus
            .par_iter()
            .map(|seq| {
                let trace = model.forward(seq, None, None)?;
                Ok((0..cfg.num_layers).map(|l| trace.layer_activations(l).clone()).collect())
            })
            .collect::<Result<Vec<Vec<_>>>>()?;
        Ok(Self {
            sequences: corpus.to_vec(),
            activations,
            num_layers: cfg.num_layers,
            features_per_layer: cfg.features_per_layer,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[TokenId] {
        &self.sequences[i]
    }

    pub fn check_feature(&self, feature: FeatureId) -> Result<()> {
        if feature.layer >= self.num_layers || feature.index >= self.features_per_layer {
            return Err(PieError::Config(format!(
                "feature {feature} outside a model with {} layers of {} features",
                self.num_layers, self.features_per_layer
            )));
        }
        Ok(())
    }

    pub fn token_activations(&self, i: usize, feature: FeatureId) -> Vec<f64> {
        self.activations[i][feature.layer].column(feature.index).to_vec()
    }

    pub fn max_activation(&self, i: usize, feature: FeatureId) -> f64 {
        self.activations[i][feature.layer]
            .column(feature.index)
            .fold(f64::NEG_INFINITY, |m, &a| m.max(a))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    /// Index into the corpus.
    pub sequence: usize,
    pub tokens: Vec<TokenId>,
    pub activations: Vec<f64>,
    pub max_activation: f64,
    /// Positions whose activation reaches `threshold * max_activation`.
    pub highlighted: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub feature: FeatureId,
    pub threshold: f64,
    /// Sorted by `max_activation` descending, corpus order on ties.
    pub exemplars: Vec<Exemplar>,
    /// Set when the feature never fires on the corpus.
    pub never_active: bool,
}

impl ExemplarSet {
    /// Highlighted token ids by frequency, most frequent first, smaller id
    /// first on ties.
    pub fn top_highlighted_tokens(&self, n: usize) -> Vec<TokenId> {
        self.top_highlighted_tokens_from(n, 0)
    }

    /// As [`Self::top_highlighted_tokens`], counting only positions
    /// `>= start`.
    pub fn top_highlighted_tokens_from(&self, n: usize, start: usize) -> Vec<TokenId> {
        let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
        for ex in &self.exemplars {
            for &p in ex.highlighted.iter().filter(|&&p| p >= start) {
                *counts.entry(ex.tokens[p]).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(TokenId, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.into_iter().take(n).map(|(t, _)| t).collect()
    }

    pub fn sequence_indices(&self) -> BTreeSet<usize> {
        self.exemplars.iter().map(|e| e.sequence).collect()
    }
}

/// Top `limit` corpus sequences by the feature's maximum activation. Only
/// sequences where the feature fires (max > 0) qualify.
pub fn extract_exemplars(cache: &CorpusCache, feature: FeatureId, limit: usize, threshold: f64) -> Result<ExemplarSet> {
    cache.check_feature(feature)?;
    if limit == 0 {
        return Err(PieError::Config("exemplar limit must be >= 1".into()));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(PieError::Config(format!("highlight threshold must lie in (0, 1], got {threshold}")));
    }
    let mut ranked: Vec<(usize, f64)> = (0..cache.len())
        .map(|i| (i, cache.max_activation(i, feature)))
        .filter(|&(_, m)| m > 0.0)
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(limit);
    let exemplars: Vec<Exemplar> = ranked
        .into_iter()
        .map(|(i, max)| {
            let activations = cache.token_activations(i, feature);
            let cut = threshold * max;
            let highlighted = activations
                .iter()
                .enumerate()
                .filter(|&(_, &a)| a >= cut)
                .map(|(p, _)| p)
                .collect();
            Exemplar {
                sequence: i,
                tokens: cache.sequence(i).to_vec(),
                activations,
                max_activation: max,
                highlighted,
            }
        })
        .collect();
    Ok(ExemplarSet {
        feature,
        threshold,
        never_active: exemplars.is_empty(),
        exemplars,
    })
}

/// `P(pos > neg) + 0.5 P(pos == neg)` over all pairs; `None` if a side is
/// empty.
pub fn auc(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let wins: f64 = pos
        .iter()
        .map(|&p| {
            neg.iter()
                .map(|&n| match p.partial_cmp(&n) {
                    Some(std::cmp::Ordering::Greater) => 1.0,
                    Some(std::cmp::Ordering::Equal) => 0.5,
                    _ => 0.0,
                })
                .sum::<f64>()
        })
        .sum();
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Rank Gini `2 AUC - 1`, in `[-1, 1]`.
pub fn gini(pos: &[f64], neg: &[f64]) -> Option<f64> {
    auc(pos, neg).map(|a| 2.0 * a - 1.0)
}

pub fn clip_unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Marks the top `ceil(q n)` activations as positive, ties with the cut
/// included, but never an example at the minimum activation: a mostly
/// silent feature keeps its silent examples negative. `None` when no
/// example is positive (all activations equal).
pub fn purity_positives(activations: &[f64], high_quantile: f64) -> Option<Vec<bool>> {
    let n = activations.len();
    let mut sorted = activations.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let take = ((high_quantile * n as f64).ceil() as usize).clamp(1, n.max(1));
    let cut = *sorted.get(take - 1)?;
    let floor = *sorted.last()?;
    let labels: Vec<bool> = activations.iter().map(|&a| a >= cut && a > floor).collect();
    labels.contains(&true).then_some(labels)
}

/// Mean precision at the rank of each positive. `None` without positives.
pub fn average_precision(ranked_labels: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, &l) in ranked_labels.iter().enumerate() {
        if l {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

/// Average precision of ranking by `relevance` (descending, index order on
/// ties) against the high-activation positives.
pub fn score_purity(activations: &[f64], relevance: &[f64], high_quantile: f64) -> Result<Option<f64>> {
    if activations.len() != relevance.len() {
        return Err(PieError::Shape(format!(
            "purity: {} activations vs {} relevance scores",
            activations.len(),
            relevance.len()
        )));
    }
    if activations.len() < 2 {
        return Err(PieError::Argument("purity needs at least 2 examples".into()));
    }
    if !(high_quantile > 0.0 && high_quantile <= 1.0) {
        return Err(PieError::Config(format!("high quantile must lie in (0, 1], got {high_quantile}")));
    }
    let Some(labels) = purity_positives(activations, high_quantile) else {
        return Ok(None);
    };
    let mut order: Vec<usize> = (0..relevance.len()).collect();
    order.sort_by(|&a, &b| relevance[b].total_cmp(&relevance[a]).then(a.cmp(&b)));
    let ranked: Vec<bool> = order.into_iter().map(|i| labels[i]).collect();
    Ok(average_precision(&ranked))
}

/// Maximum activation of `feature` over a sequence, checked against the
/// model's vocabulary and context length.
pub fn sequence_max_activation(model: &ReplacementModel, feature: FeatureId, tokens: &[TokenId]) -> Result<f64> {
    let cfg = model.config();
    if feature.layer >= cfg.num_layers || feature.index >= cfg.features_per_layer {
        return Err(PieError::Config(format!("feature {feature} outside the model")));
    }
    let trace = model.forward(tokens, None, None)?;
    Ok(trace
        .layer_activations(feature.layer)
        .column(feature.index)
        .fold(f64::NEG_INFINITY, |m, &a| m.max(a)))
}

fn max_activations(model: &ReplacementModel, feature: FeatureId, seqs: &[Vec<TokenId>]) -> Result<Vec<f64>> {
    seqs.iter().map(|s| sequence_max_activation(model, feature, s)).collect()
}

/// Raw rank Gini of synthetic positives against controls.
pub fn score_clarity(
    model: &ReplacementModel,
    feature: FeatureId,
    synthetic_pos: &[Vec<TokenId>],
    control: &[Vec<TokenId>],
) -> Result<f64> {
    if synthetic_pos.is_empty() || control.is_empty() {
        return Err(PieError::Argument("clarity needs synthetic positives and controls".into()));
    }
    let pos = max_activations(model, feature, synthetic_pos)?;
    let neg = max_activations(model, feature, control)?;
    Ok(gini(&pos, &neg).expect("both sides non-empty"))
}

/// Raw rank Gini of auditor-matching samples against the rest; `None` if
/// either group is empty.
pub fn score_responsiveness(model: &ReplacementModel, feature: FeatureId, rated: &[(Vec<TokenId>, bool)]) -> Result<Option<f64>> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (seq, matches) in rated {
        let a = sequence_max_activation(model, feature, seq)?;
        if *matches { pos.push(a) } else { neg.push(a) }
    }
    Ok(gini(&pos, &neg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescription {
    pub feature: FeatureId,
    pub text: String,
    /// `stub` or `external`.
    pub explainer: String,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl FeatureDescription {
    pub fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(PieError::Client(format!("empty description for {}", self.feature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBatch {
    pub positives: Vec<Vec<TokenId>>,
    pub negatives: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub relevance: f64,
    pub matches: bool,
}

pub trait ExplainerClient: Send + Sync {
    fn explain(&self, exemplars: &ExemplarSet) -> Result<FeatureDescription>;
}

/// Two calls per feature: `synthesize` for clarity, `rate` for purity and
/// responsiveness.
pub trait AuditorClient: Send + Sync {
    fn synthesize(&self, description: &FeatureDescription, per_class: usize) -> Result<SyntheticBatch>;
    fn rate(&self, description: &FeatureDescription, samples: &[Vec<TokenId>]) -> Result<Vec<Rating>>;
}

pub const AUDITOR_CALLS_PER_FEATURE: usize = 2;

/// Describes a feature by its three most often highlighted tokens.
#[derive(Debug, Clone, Default)]
pub struct StubExplainer {
    /// Features whose requests fail, for exercising failure records.
    pub fail_on: BTreeSet<FeatureId>,
}

impl ExplainerClient for StubExplainer {
    fn explain(&self, exemplars: &ExemplarSet) -> Result<FeatureDescription> {
        if self.fail_on.contains(&exemplars.feature) {
            return Err(PieError::Client(format!("stub explainer refused {}", exemplars.feature)));
        }
        // position 0 is BOS in every corpus sequence and describes nothing
        let tokens = exemplars.top_highlighted_tokens_from(3, 1);
        Ok(FeatureDescription {
            feature: exemplars.feature,
            text: if tokens.is_empty() {
                format!("feature {} fires only at the sequence start", exemplars.feature)
            } else {
                format!("feature {} fires on tokens {tokens:?}", exemplars.feature)
            },
            explainer: "stub".into(),
            provenance: BTreeMap::from([("exemplars".into(), exemplars.exemplars.len().to_string())]),
        })
    }
}

/// Token ids listed in the trailing `[..]` of a description.
pub fn description_tokens(text: &str) -> Vec<TokenId> {
    let (Some(open), Some(close)) = (text.rfind('['), text.rfind(']')) else {
        return Vec::new();
    };
    if close < open {
        return Vec::new();
    }
    text[open + 1..close]
        .split(',')
        .filter_map(|s| s.trim().parse().ok())
        .collect()
}

/// Builds positives around the described tokens and rates samples by
/// token overlap.
#[derive(Debug, Clone)]
pub struct StubAuditor {
    pub vocab_size: usize,
    pub sequence_len: usize,
    pub seed: u64,
    pub fail_on: BTreeSet<FeatureId>,
}

impl StubAuditor {
    pub fn new(vocab_size: usize, sequence_len: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            sequence_len,
            seed,
            fail_on: BTreeSet::new(),
        }
    }

    fn check(&self, feature: FeatureId) -> Result<()> {
        if self.fail_on.contains(&feature) {
            return Err(PieError::Client(format!("stub auditor refused {feature}")));
        }
        Ok(())
    }
}

impl AuditorClient for StubAuditor {
    fn synthesize(&self, description: &FeatureDescription, per_class: usize) -> Result<SyntheticBatch> {
        self.check(description.feature)?;
        if self.sequence_len < 2 || self.vocab_size < 2 {
            return Err(PieError::Config("stub auditor needs sequences of >= 2 tokens over >= 2 ids".into()));
        }
        let described = description_tokens(&description.text);
        let others: Vec<TokenId> = (1..self.vocab_size as TokenId).filter(|t| !described.contains(t)).collect();
        if others.is_empty() {
            return Err(PieError::Client("description covers the whole vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("synthesize/{}", description.feature)));
        let sample = |planted: Option<TokenId>, rng: &mut ChaCha8Rng| -> Vec<TokenId> {
            let mut seq: Vec<TokenId> = std::iter::once(0)
                .chain((1..self.sequence_len).map(|_| *others.choose(rng).expect("non-empty")))
                .collect();
            if let Some(t) = planted {
                let at = rng.random_range(1..self.sequence_len);
                seq[at] = t;
            }
            seq
        };
        let positives = (0..per_class)
            .map(|i| sample(described.get(i % described.len().max(1)).copied(), &mut rng))
            .collect();
        let negatives = (0..per_class).map(|_| sample(None, &mut rng)).collect();
        Ok(SyntheticBatch { positives, negatives })
    }

    fn rate(&self, description: &FeatureDescription, samples: &[Vec<TokenId>]) -> Result<Vec<Rating>> {
        self.check(description.feature)?;
        let described = description_tokens(&description.text);
        Ok(samples
            .iter()
            .map(|s| {
                let hits = described.iter().filter(|t| s.contains(t)).count();
                let relevance = if described.is_empty() { 0.0 } else { hits as f64 / described.len() as f64 };
                Rating {
                    relevance,
                    matches: hits > 0,
                }
            })
            .collect())
    }
}

/// Transport settings of the HTTP clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub timeout_ms: u64,
    pub attempts: u32,
    /// First retry delay; doubles per attempt.
    pub backoff_ms: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            timeout_ms: 30_000,
            attempts: 3,
            backoff_ms: 250,
        }
    }
}

#[derive(Debug, Clone)]
struct JsonTransport {
    agent: ureq::Agent,
    cfg: HttpConfig,
}

impl JsonTransport {
    fn new(cfg: HttpConfig) -> Result<Self> {
        if cfg.attempts == 0 {
            return Err(PieError::Config("http attempts must be >= 1".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build()
            .into();
        Ok(Self { agent, cfg })
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, url: &str, body: &Req) -> Result<Resp> {
        let mut last = String::new();
        for attempt in 0..self.cfg.attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (attempt - 1)));
            }
            match self.agent.post(url).send_json(body) {
                Ok(mut resp) => match resp.body_mut().read_json::<Resp>() {
                    Ok(v) => return Ok(v),
                    Err(e) => last = format!("malformed response: {e}"),
                },
                // client errors will not improve on retry
                Err(ureq::Error::StatusCode(code)) if (400..500).contains(&code) => {
                    return Err(PieError::Client(format!("{url}: status {code}")));
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(PieError::Client(format!("{url}: {} attempts failed, last: {last}", self.cfg.attempts)))
    }
}

#[derive(Debug, Deserialize)]
struct ExplainResponse {
    description: String,
}

/// `POST {url}` with the exemplar set as JSON, expecting
/// `{"description": "..."}`.
#[derive(Debug, Clone)]
pub struct HttpExplainer {
    url: String,
    transport: JsonTransport,
}

impl HttpExplainer {
    pub fn new(url: impl Into<String>, cfg: HttpConfig) -> Result<Self> {
        Ok(Self {
            url: url.into(),
            transport: JsonTransport::new(cfg)?,
        })
    }
}

impl ExplainerClient for HttpExplainer {
    fn explain(&self, exemplars: &ExemplarSet) -> Result<FeatureDescription> {
        let resp: ExplainResponse = self.transport.post(&self.url, exemplars)?;
        let d = FeatureDescription {
            feature: exemplars.feature,
            text: resp.description,
            explainer: "external".into(),
            provenance: BTreeMap::from([("endpoint".into(), self.url.clone())]),
        };
        d.validate()?;
        Ok(d)
    }
}

#[derive(Debug, Serialize)]
struct SynthesizeRequest<'a> {
    feature: FeatureId,
    description: &'a str,
    per_class: usize,
}

#[derive(Debug, Serialize)]
struct RateRequest<'a> {
    feature: FeatureId,
    description: &'a str,
    samples: &'a [Vec<TokenId>],
}

#[derive(Debug, Deserialize)]
struct RateResponse {
    ratings: Vec<Rating>,
}

/// `POST {base}/synthesize` returning a [`SyntheticBatch`] and
/// `POST {base}/rate` returning `{"ratings": [...]}`.
#[derive(Debug, Clone)]
pub struct HttpAuditor {
    base: String,
    transport: JsonTransport,
}

impl HttpAuditor {
    pub fn new(base: impl Into<String>, cfg: HttpConfig) -> Result<Self> {
        Ok(Self {
            base: base.into().trim_end_matches('/').to_string(),
            transport: JsonTransport::new(cfg)?,
        })
    }
}

impl AuditorClient for HttpAuditor {
    fn synthesize(&self, description: &FeatureDescription, per_class: usize) -> Result<SyntheticBatch> {
        let req = SynthesizeRequest {
            feature: description.feature,
            description: &description.text,
            per_class,
        };
        self.transport.post(&format!("{}/synthesize", self.base), &req)
    }

    fn rate(&self, description: &FeatureDescription, samples: &[Vec<TokenId>]) -> Result<Vec<Rating>> {
        let req = RateRequest {
            feature: description.feature,
            description: &description.text,
            samples,
        };
        let resp: RateResponse = self.transport.post(&format!("{}/rate", self.base), &req)?;
        if resp.ratings.len() != samples.len() {
            return Err(PieError::Client(format!(
                "auditor returned {} ratings for {} samples",
                resp.ratings.len(),
                samples.len()
            )));
        }
        Ok(resp.ratings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpretConfig {
    pub exemplar_limit: usize,
    pub highlight_threshold: f64,
    pub synthetic_per_class: usize,
    pub n_eval: usize,
    pub high_quantile: f64,
    /// Features processed concurrently, and so the cap on in-flight calls.
    pub max_in_flight: usize,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            exemplar_limit: DEFAULT_EXEMPLAR_LIMIT,
            highlight_threshold: DEFAULT_HIGHLIGHT_THRESHOLD,
            synthetic_per_class: DEFAULT_SYNTHETIC_PER_CLASS,
            n_eval: DEFAULT_N_EVAL,
            high_quantile: DEFAULT_HIGH_QUANTILE,
            max_in_flight: 4,
        }
    }
}

impl InterpretConfig {
    pub fn validate(&self) -> Result<()> {
        if self.exemplar_limit == 0 || self.synthetic_per_class == 0 || self.n_eval < 2 || self.max_in_flight == 0 {
            return Err(PieError::Config(
                "interpretation: exemplar_limit, synthetic_per_class and max_in_flight must be >= 1, n_eval >= 2".into(),
            ));
        }
        if !(self.highlight_threshold > 0.0 && self.highlight_threshold <= 1.0) {
            return Err(PieError::Config("interpretation: highlight_threshold must lie in (0, 1]".into()));
        }
        if !(self.high_quantile > 0.0 && self.high_quantile <= 1.0) {
            return Err(PieError::Config("interpretation: high_quantile must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Reported metrics are clipped to `[0, 1]`; `None` marks an undefined
/// metric, excluded from aggregates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub clarity: Option<f64>,
    pub purity: Option<f64>,
    pub responsiveness: Option<f64>,
    pub n_synthetic: usize,
    pub n_control: usize,
    pub n_eval: usize,
}

/// One line of the interpretation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretationRecord {
    pub feature: FeatureId,
    pub description: Option<String>,
    pub clarity: Option<f64>,
    pub purity: Option<f64>,
    pub responsiveness: Option<f64>,
    pub n_eval: usize,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretationReport {
    pub records: Vec<InterpretationRecord>,
    pub explainer_calls: usize,
    pub auditor_calls: usize,
}

impl InterpretationReport {
    pub fn features(&self) -> usize {
        self.records.len()
    }

    pub fn client_calls(&self) -> usize {
        self.explainer_calls + self.auditor_calls
    }

    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| r.description.is_none()).count()
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

struct Counted<'a> {
    explainer: &'a dyn ExplainerClient,
    auditor: &'a dyn AuditorClient,
    explainer_calls: AtomicUsize,
    auditor_calls: AtomicUsize,
}

fn check_sequences(model: &ReplacementModel, what: &str, seqs: &[Vec<TokenId>]) -> Result<()> {
    let cfg = model.config();
    for s in seqs {
        if s.is_empty() || s.len() > cfg.max_positions || s.iter().any(|&t| t as usize >= cfg.vocab_size) {
            return Err(PieError::Client(format!("{what}: sequence does not fit the model vocabulary or context")));
        }
    }
    Ok(())
}

fn interpret_feature(
    model: &ReplacementModel,
    cache: &CorpusCache,
    feature: FeatureId,
    clients: &Counted<'_>,
    cfg: &InterpretConfig,
) -> Result<InterpretationRecord> {
    let exemplars = extract_exemplars(cache, feature, cfg.exemplar_limit, cfg.highlight_threshold)?;
    let mut failures = Vec::new();
    if exemplars.never_active {
        failures.push("no exemplars: feature never activates on the corpus".to_string());
    }
    let in_exemplars = exemplars.sequence_indices();
    let eval: Vec<usize> = (0..cache.len()).filter(|i| !in_exemplars.contains(i)).take(cfg.n_eval).collect();
    let mut record = InterpretationRecord {
        feature,
        description: None,
        clarity: None,
        purity: None,
        responsiveness: None,
        n_eval: eval.len(),
        failures,
    };

    clients.explainer_calls.fetch_add(1, Ordering::Relaxed);
    let description = match clients.explainer.explain(&exemplars).and_then(|d| d.validate().map(|_| d)) {
        Ok(d) => d,
        Err(e) => {
            record.failures.push(format!("explainer: {e}"));
            return Ok(record);
        }
    };
    record.description = Some(description.text.clone());

    clients.auditor_calls.fetch_add(1, Ordering::Relaxed);
    match clients
        .auditor
        .synthesize(&description, cfg.synthetic_per_class)
        .and_then(|b| {
            check_sequences(model, "synthetic positives", &b.positives)?;
            check_sequences(model, "synthetic negatives", &b.negatives)?;
            Ok(b)
        }) {
        Ok(batch) if batch.positives.is_empty() || batch.negatives.is_empty() => {
            record.failures.push("clarity: auditor returned an empty synthetic batch".into());
        }
        Ok(batch) => {
            record.clarity = Some(clip_unit(score_clarity(model, feature, &batch.positives, &batch.negatives)?));
        }
        Err(e) => record.failures.push(format!("auditor synthesize: {e}")),
    }

    let samples: Vec<Vec<TokenId>> = eval.iter().map(|&i| cache.sequence(i).to_vec()).collect();
    clients.auditor_calls.fetch_add(1, Ordering::Relaxed);
    match clients.auditor.rate(&description, &samples) {
        Ok(ratings) if ratings.len() != samples.len() => {
            record.failures.push(format!("auditor rate: {} ratings for {} samples", ratings.len(), samples.len()));
        }
        Ok(ratings) => {
            let acts: Vec<f64> = eval.iter().map(|&i| cache.max_activation(i, feature)).collect();
            let relevance: Vec<f64> = ratings.iter().map(|r| r.relevance).collect();
            if acts.len() >= 2 {
                record.purity = score_purity(&acts, &relevance, cfg.high_quantile)?;
            }
            if record.purity.is_none() {
                record.failures.push("purity: undefined, no high-activation split".into());
            }
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for (a, r) in acts.iter().zip(&ratings) {
                if r.matches { pos.push(*a) } else { neg.push(*a) }
            }
            record.responsiveness = gini(&pos, &neg).map(clip_unit);
            if record.responsiveness.is_none() {
                record.failures.push("responsiveness: undefined, ratings all agree".into());
            }
        }
        Err(e) => record.failures.push(format!("auditor rate: {e}")),
    }
    Ok(record)
}

/// Interprets every feature of `features` in ascending feature order.
/// Client failures become per-feature failure records; configuration and
/// model errors abort.
pub fn run_interpretation(
    model: &ReplacementModel,
    features: &UniqueFeatureSet,
    corpus: &[Vec<TokenId>],
    explainer: &dyn ExplainerClient,
    auditor: &dyn AuditorClient,
    cfg: &InterpretConfig,
) -> Result<InterpretationReport> {
    cfg.validate()?;
    let clients = Counted {
        explainer,
        auditor,
        explainer_calls: AtomicUsize::new(0),
        auditor_calls: AtomicUsize::new(0),
    };
    if features.is_empty() {
        return Ok(InterpretationReport {
            records: Vec::new(),
            explainer_calls: 0,
            auditor_calls: 0,
        });
    }
    let cache = CorpusCache::new(model, corpus)?;
    let ids: Vec<FeatureId> = features.features().collect();
    for &f in &ids {
        cache.check_feature(f)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_in_flight)
        .build()
        .map_err(|e| PieError::Config(format!("worker pool: {e}")))?;
    let records = pool.install(|| {
        ids.par_iter()
            .map(|&f| interpret_feature(model, &cache, f, &clients, cfg))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(InterpretationReport {
        records,
        explainer_calls: clients.explainer_calls.into_inner(),
        auditor_calls: clients.auditor_calls.into_inner(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert_eq!(auc(&[3.0, 1.0], &[2.0, 0.0]), Some(0.75));
        assert_eq!(gini(&[3.0, 1.0], &[2.0, 0.0]), Some(0.5));
        assert_eq!(gini(&[2.0], &[1.0, 3.0]), Some(0.0));
        assert_eq!(gini(&[1.0, 1.0], &[1.0]), Some(0.0));
        assert_eq!(gini(&[], &[1.0]), None);
        let ap = average_precision(&[true, false, true, false]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn purity_extremes() {
        let acts = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(score_purity(&acts, &acts, 0.25).unwrap(), Some(1.0));
        let inverse = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(score_purity(&acts, &inverse, 0.25).unwrap(), Some(0.25));
        assert_eq!(score_purity(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0], 0.25).unwrap(), None);
        assert!(score_purity(&[1.0], &[1.0], 0.25).is_err());
        assert!(score_purity(&[1.0, 2.0], &[1.0], 0.25).is_err());
    }

    #[test]
    fn purity_cut_ties() {
        let silent = [0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let labels = purity_positives(&silent, 0.25).unwrap();
        assert_eq!(labels.iter().filter(|&&l| l).count(), 1);
        assert!(labels[2]);
        assert_eq!(purity_positives(&[5.0, 5.0, 5.0, 1.0], 0.25), Some(vec![true, true, true, false]));
        assert_eq!(purity_positives(&[2.0, 1.0], 1.0), Some(vec![true, false]));
        assert_eq!(purity_positives(&[1.0, 1.0], 0.25), None);
    }

    #[test]
    fn description_token_parsing() {
        assert_eq!(description_tokens("feature L0.1 fires on tokens [12, 7, 30]"), vec![12, 7, 30]);
        assert_eq!(description_tokens("fires on tokens []"), Vec::<TokenId>::new());
        assert_eq!(description_tokens("no list"), Vec::<TokenId>::new());
    }
}
