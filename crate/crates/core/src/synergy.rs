// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interaction-aware reranking of occurrences near the budget cutoff.
//!
//! The FAP ranking is split into a confident core and a boundary window.
//! Each boundary candidate is paired with a sample of core partners; the
//! median pairwise synergy, normalised by the partners' median individual
//! effect and clamped at zero, is added to the candidate's standardised base
//! score. The best candidates fill the slots left after the core.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    derive_seed, select_topk, stats, Circuit, Method, PromptContext, RetainedOccurrence, ScoreTable,
};
use crate::error::{PieError, Result};
use crate::model::{Metric, PatchAction, PatchSpec};
use crate::occurrence::FeatureOccurrence;

/// Guard below which the partners' median individual effect counts as zero.
const EFFECT_FLOOR: f64 = 1e-12;

/// How a candidate's base score is standardised against the core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZBaseMode {
    /// `|S| / median_core |S|`.
    #[default]
    MedianRatio,
    /// `(|S| - mean_core |S|) / std_core |S|`.
    ZScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynergyConfig {
    pub lambda: f64,
    /// Percent of `K` on each side of the cutoff, in `(0, 50]`.
    pub boundary_percent: f64,
    pub partners_per_candidate: usize,
    pub partner_seed: u64,
    pub z_base: ZBaseMode,
}

impl Default for SynergyConfig {
    fn default() -> Self {
        Self {
            lambda: 3.0,
            boundary_percent: 25.0,
            partners_per_candidate: 8,
            partner_seed: 0,
            z_base: ZBaseMode::MedianRatio,
        }
    }
}

impl SynergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(PieError::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.boundary_percent > 0.0 && self.boundary_percent <= 50.0) {
            return Err(PieError::Config(format!(
                "boundary_percent must lie in (0, 50], got {}",
                self.boundary_percent
            )));
        }
        if self.partners_per_candidate == 0 {
            return Err(PieError::Config("partners_per_candidate must be >= 1".into()));
        }
        Ok(())
    }

    /// `(|core|, end of the window)` for budget `k`, before clipping to the
    /// number of available occurrences.
    pub fn window(&self, k: usize) -> (usize, usize) {
        let frac = self.boundary_percent / 100.0;
        let ceil = |x: f64| (x - 1e-9).ceil().max(0.0) as usize;
        (ceil((1.0 - frac) * k as f64), ceil((1.0 + frac) * k as f64))
    }
}

/// Ranked core prefix and the boundary window right after it.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPartition {
    pub k: usize,
    pub core: Vec<(FeatureOccurrence, f64)>,
    pub boundary: Vec<(FeatureOccurrence, f64)>,
}

/// Splits the `|score|` ranking at budget `k`.
pub fn partition_boundary(scores: &ScoreTable, k: usize, config: &SynergyConfig) -> Result<BoundaryPartition> {
    config.validate()?;
    if k < 2 {
        return Err(PieError::Partition(format!("budget must be at least 2, got {k}")));
    }
    let (core_len, end) = config.window(k);
    if core_len == 0 {
        return Err(PieError::Partition("boundary percent leaves an empty core".into()));
    }
    let ranked = scores.ranked();
    if ranked.len() <= core_len {
        return Err(PieError::Partition(format!(
            "{} scoreable occurrences leave no boundary after a core of {core_len}",
            ranked.len()
        )));
    }
    let end = end.min(ranked.len());
    Ok(BoundaryPartition {
        k,
        core: ranked[..core_len].to_vec(),
        boundary: ranked[core_len..end].to_vec(),
    })
}

/// `M(S)`: metric of the corrupted run with `S` frozen to clean, minus the
/// plain corrupted metric.
pub fn recovery(ctx: &PromptContext<'_>, metric: &Metric, set: &[FeatureOccurrence]) -> Result<f64> {
    let patch = PatchSpec::uniform(set.iter().copied(), PatchAction::FreezeToClean);
    Ok(metric.evaluate(&ctx.run_corrupted(&patch)?) - metric.evaluate(&ctx.corrupted))
}

/// `Syn(b, c) = M({b, c}) - M({b}) - M({c})`.
pub fn pairwise_synergy(
    ctx: &PromptContext<'_>,
    metric: &Metric,
    candidate: FeatureOccurrence,
    partner: FeatureOccurrence,
) -> Result<f64> {
    if candidate == partner {
        return Err(PieError::Argument(format!("synergy of {candidate} with itself")));
    }
    Ok(recovery(ctx, metric, &[candidate, partner])?
        - recovery(ctx, metric, &[candidate])?
        - recovery(ctx, metric, &[partner])?)
}

/// Rerank inputs and outputs for one boundary candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynergyScore {
    #[serde(flatten)]
    pub occurrence: FeatureOccurrence,
    pub base_score: f64,
    pub z_base: f64,
    pub z_syn: f64,
    pub z_syn_plus: f64,
    pub s_prime: f64,
    pub partners: Vec<FeatureOccurrence>,
    pub synergies: Vec<f64>,
}

impl SynergyScore {
    /// Assembles a score from its parts; `z_syn_plus` and `s_prime` follow.
    pub fn new(occurrence: FeatureOccurrence, base_score: f64, z_base: f64, z_syn: f64, lambda: f64) -> Self {
        let z_syn_plus = z_syn.max(0.0);
        Self {
            occurrence,
            base_score,
            z_base,
            z_syn,
            z_syn_plus,
            s_prime: z_base + lambda * z_syn_plus,
            partners: Vec::new(),
            synergies: Vec::new(),
        }
    }
}

/// Audit line for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub prompt_id: String,
    pub k: usize,
    #[serde(flatten)]
    pub score: SynergyScore,
    /// `selected` or `rejected`.
    pub decision: String,
    /// Whether plain top-K would have kept it.
    pub in_base_topk: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynergySelection {
    pub circuit: Circuit,
    pub scores: Vec<SynergyScore>,
    pub audit: Vec<AuditRecord>,
}

fn z_base_fn(core: &[(FeatureOccurrence, f64)], mode: ZBaseMode) -> impl Fn(f64) -> f64 {
    let mags: Vec<f64> = core.iter().map(|(_, s)| s.abs()).collect();
    let (center, spread) = match mode {
        ZBaseMode::MedianRatio => (0.0, stats::median(&mags).unwrap_or(0.0)),
        ZBaseMode::ZScore => stats::mean_std(&mags),
    };
    move |s: f64| {
        if spread > 0.0 && spread.is_finite() {
            (s.abs() - center) / spread
        } else {
            0.0
        }
    }
}

/// Orders candidates by `S'` descending, ties by base rank.
pub fn order_candidates(scores: &[SynergyScore], base_rank: &BTreeMap<FeatureOccurrence, usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .s_prime
            .total_cmp(&scores[a].s_prime)
            .then(base_rank[&scores[a].occurrence].cmp(&base_rank[&scores[b].occurrence]))
    });
    idx
}

/// Scores every boundary candidate and fills the `K - |core|` open slots.
pub fn rerank_boundary(
    ctx: &PromptContext<'_>,
    partition: &BoundaryPartition,
    config: &SynergyConfig,
    metric: &Metric,
) -> Result<SynergySelection> {
    config.validate()?;
    let z_base = z_base_fn(&partition.core, config.z_base);
    let core: Vec<FeatureOccurrence> = partition.core.iter().map(|(o, _)| *o).collect();

    // individual recoveries of core partners, computed once
    let core_effect: BTreeMap<FeatureOccurrence, f64> = core
        .par_iter()
        .map(|&c| Ok((c, recovery(ctx, metric, &[c])?)))
        .collect::<Result<_>>()?;

    let n_partners = config.partners_per_candidate.min(core.len());
    let scores: Vec<SynergyScore> = partition
        .boundary
        .par_iter()
        .map(|&(cand, base)| {
            let seed = derive_seed(config.partner_seed, &format!("{}/{cand}", ctx.id()));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut partners: Vec<FeatureOccurrence> =
                core.choose_multiple(&mut rng, n_partners).copied().collect();
            partners.sort();
            let alone = recovery(ctx, metric, &[cand])?;
            let synergies = partners
                .iter()
                .map(|&p| Ok(recovery(ctx, metric, &[cand, p])? - alone - core_effect[&p]))
                .collect::<Result<Vec<f64>>>()?;
            let effects: Vec<f64> = partners.iter().map(|p| core_effect[p].abs()).collect();
            let denom = stats::median(&effects).unwrap_or(0.0);
            let z_syn = if denom < EFFECT_FLOOR {
                0.0
            } else {
                stats::median(&synergies).unwrap_or(0.0) / denom
            };
            let mut s = SynergyScore::new(cand, base, z_base(base), z_syn, config.lambda);
            s.partners = partners;
            s.synergies = synergies;
            Ok(s)
        })
        .collect::<Result<_>>()?;

    let base_rank: BTreeMap<FeatureOccurrence, usize> = partition
        .boundary
        .iter()
        .enumerate()
        .map(|(i, (o, _))| (*o, i))
        .collect();
    let open = partition.k.saturating_sub(core.len());
    let order = order_candidates(&scores, &base_rank);
    let chosen: Vec<usize> = order.into_iter().take(open).collect();

    let mut retained: Vec<RetainedOccurrence> = partition
        .core
        .iter()
        .map(|&(occurrence, score)| RetainedOccurrence { occurrence, score })
        .collect();
    retained.extend(chosen.iter().map(|&i| RetainedOccurrence {
        occurrence: scores[i].occurrence,
        score: scores[i].base_score,
    }));

    let audit = scores
        .iter()
        .enumerate()
        .map(|(i, s)| AuditRecord {
            prompt_id: ctx.id().to_string(),
            k: partition.k,
            score: s.clone(),
            decision: if chosen.contains(&i) { "selected" } else { "rejected" }.into(),
            in_base_topk: base_rank[&s.occurrence] < open,
        })
        .collect();

    Ok(SynergySelection {
        circuit: Circuit {
            prompt_id: ctx.id().to_string(),
            method: Method::FapSynergy,
            k: partition.k,
            retained,
        },
        scores,
        audit,
    })
}

/// FAP-Synergy selection at budget `k`. When every scoreable occurrence fits
/// in the budget, or the core already fills it, no rerank is needed and the
/// plain top-K is returned.
pub fn select_synergy(
    ctx: &PromptContext<'_>,
    fap: &ScoreTable,
    k: usize,
    config: &SynergyConfig,
    metric: &Metric,
) -> Result<SynergySelection> {
    config.validate()?;
    let (core_len, _) = config.window(k);
    if fap.len() <= k || core_len >= k {
        let mut circuit = select_topk(fap, k)?;
        circuit.method = Method::FapSynergy;
        return Ok(SynergySelection {
            circuit,
            scores: Vec::new(),
            audit: Vec::new(),
        });
    }
    let partition = partition_boundary(fap, k, config)?;
    rerank_boundary(ctx, &partition, config, metric)
}
