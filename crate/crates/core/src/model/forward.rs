// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{AttentionKind, ErrorMode, ReplacementModel, TokenId};
use crate::error::{PieError, Result};
use crate::occurrence::FeatureOccurrence;

/// What to do with one occurrence during a patched forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchAction {
    /// Take the activation from the reference trace (a corrupted run).
    FreezeToCorrupted,
    /// Take the activation from the reference trace (a clean run).
    FreezeToClean,
    Zero,
    Amplify { scale: f64 },
}

impl PatchAction {
    fn needs_reference(self) -> bool {
        matches!(self, Self::FreezeToCorrupted | Self::FreezeToClean)
    }
}

/// At most one action per occurrence; the map enforces it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PatchSpec {
    actions: BTreeMap<FeatureOccurrence, PatchAction>,
}

impl PatchSpec {
    pub fn new() -> Self {
        Self::default()
    }

    /// Same action for every listed occurrence.
    pub fn uniform(occurrences: impl IntoIterator<Item = FeatureOccurrence>, action: PatchAction) -> Self {
        Self {
            actions: occurrences.into_iter().map(|o| (o, action)).collect(),
        }
    }

    /// Replaces any earlier action on the same occurrence.
    pub fn insert(&mut self, occurrence: FeatureOccurrence, action: PatchAction) -> Option<PatchAction> {
        self.actions.insert(occurrence, action)
    }

    pub fn get(&self, occurrence: &FeatureOccurrence) -> Option<PatchAction> {
        self.actions.get(occurrence).copied()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FeatureOccurrence, &PatchAction)> {
        self.actions.iter()
    }

    fn needs_reference(&self) -> bool {
        self.actions.values().any(|a| a.needs_reference())
    }
}

/// Per-layer error vectors (`T x d_model` each) added after the feature
/// writes of that layer.
pub type ErrorTerms = Vec<Array2<f64>>;

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub patch: Option<&'a PatchSpec>,
    /// Source of frozen activations for freeze actions.
    pub reference: Option<&'a RunTrace>,
    /// In frozen-error mode, use these instead of computing the error path.
    pub frozen_errors: Option<&'a ErrorTerms>,
    /// Additive interventions on residual sites, applied before the site is
    /// read downstream.
    pub site_deltas: &'a [SiteDelta],
}

/// Adds `delta` to residual site `site` at `position`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDelta {
    pub site: usize,
    pub position: usize,
    pub delta: Array1<f64>,
}

/// Cached attention intermediates for one layer.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AttentionCache {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    /// `T x T`, row `t` is the causal softmax over positions `0..=t`.
    pub pattern: Array2<f64>,
}

/// Everything a scorer needs from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub(crate) tokens: Vec<TokenId>,
    /// `L + 1` sites, each `T x d_model`.
    pub(crate) residual: Vec<Array2<f64>>,
    /// Encoder inputs per layer (site plus attention mix), `T x d_model`.
    pub(crate) encoder_input: Vec<Array2<f64>>,
    /// Pre-activations per layer, `T x F`.
    pub(crate) preact: Vec<Array2<f64>>,
    /// Activations per layer after patching, `T x F`.
    pub(crate) act: Vec<Array2<f64>>,
    /// 1 for live occurrences, 0 for frozen/zeroed, `scale` for amplified.
    pub(crate) patch_scale: Vec<Array2<f64>>,
    pub(crate) attention: Option<Vec<AttentionCache>>,
    pub(crate) errors: ErrorTerms,
    pub(crate) logits: Array2<f64>,
}

impl RunTrace {
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_sites(&self) -> usize {
        self.residual.len()
    }

    /// Residual vector `h_s(t)`.
    pub fn residual(&self, site: usize, position: usize) -> Array1<f64> {
        self.residual[site].row(position).to_owned()
    }

    pub fn residual_site(&self, site: usize) -> &Array2<f64> {
        &self.residual[site]
    }

    pub fn activation(&self, occ: FeatureOccurrence) -> f64 {
        self.act[occ.layer][[occ.position, occ.feature]]
    }

    pub fn preactivation(&self, occ: FeatureOccurrence) -> f64 {
        self.preact[occ.layer][[occ.position, occ.feature]]
    }

    /// `T x F` activations of one layer.
    pub fn layer_activations(&self, layer: usize) -> &Array2<f64> {
        &self.act[layer]
    }

    pub fn error_terms(&self) -> &ErrorTerms {
        &self.errors
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn last_logits(&self) -> Array1<f64> {
        self.logits.row(self.len() - 1).to_owned()
    }

    /// Softmax of the logits at `position`.
    pub fn distribution(&self, position: usize) -> Vec<f64> {
        softmax(self.logits.row(position).iter().copied())
    }

    pub fn last_distribution(&self) -> Vec<f64> {
        self.distribution(self.len() - 1)
    }

    /// Occurrences with nonzero activation, in lexicographic order.
    pub fn active_occurrences(&self) -> Vec<FeatureOccurrence> {
        let mut out = Vec::new();
        for (layer, acts) in self.act.iter().enumerate() {
            let (t_len, f_len) = acts.dim();
            for feature in 0..f_len {
                for position in 0..t_len {
                    if acts[[position, feature]] != 0.0 {
                        out.push(FeatureOccurrence::new(layer, feature, position));
                    }
                }
            }
        }
        out
    }

    /// Count of nonzero activations over all layers and positions.
    pub fn active_count(&self) -> usize {
        self.act.iter().map(|a| a.iter().filter(|v| **v != 0.0).count()).sum()
    }
}

pub(crate) fn softmax(values: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl ReplacementModel {
    /// Runs the model on `tokens`, applying `patch` with activations taken
    /// from `reference` where an action asks for them.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        patch: Option<&PatchSpec>,
        reference: Option<&RunTrace>,
    ) -> Result<RunTrace> {
        self.forward_with(
            tokens,
            &ForwardOptions {
                patch,
                reference,
                ..ForwardOptions::default()
            },
        )
    }

    pub fn forward_with(&self, tokens: &[TokenId], opts: &ForwardOptions<'_>) -> Result<RunTrace> {
        let cfg = self.config();
        let w = self.weights();
        let seq = tokens.len();
        let (n_layers, d, n_feat) = (cfg.num_layers, cfg.d_model, cfg.features_per_layer);
        if seq == 0 {
            return Err(PieError::Shape("empty token sequence".into()));
        }
        if seq > cfg.max_positions {
            return Err(PieError::Shape(format!(
                "sequence of length {seq} exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(PieError::Shape(format!(
                "token {bad} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
        if let Some(patch) = opts.patch {
            if patch.needs_reference() {
                match opts.reference {
                    None => {
                        return Err(PieError::Argument(
                            "freeze actions need a reference trace".into(),
                        ))
                    }
                    Some(r) if r.len() != seq => {
                        return Err(PieError::Shape(format!(
                            "reference trace has length {}, tokens have length {seq}",
                            r.len()
                        )))
                    }
                    Some(_) => {}
                }
            }
            for occ in patch.actions.keys() {
                if occ.layer >= n_layers || occ.feature >= n_feat || occ.position >= seq {
                    return Err(PieError::Shape(format!("patched occurrence {occ} out of bounds")));
                }
            }
        }
        for sd in opts.site_deltas {
            if sd.site > n_layers || sd.position >= seq || sd.delta.len() != d {
                return Err(PieError::Shape(format!(
                    "site delta at site {} position {} does not fit the run",
                    sd.site, sd.position
                )));
            }
        }
        let apply_deltas = |site_idx: usize, values: &mut Array2<f64>| {
            for sd in opts.site_deltas.iter().filter(|sd| sd.site == site_idx) {
                let mut row = values.row_mut(sd.position);
                row += &sd.delta;
            }
        };
        if let Some(errs) = opts.frozen_errors {
            if errs.len() != n_layers || errs.iter().any(|e| e.dim() != (seq, d)) {
                return Err(PieError::Shape("frozen error terms do not match the sequence".into()));
            }
        }

        let mut site = Array2::<f64>::zeros((seq, d));
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &w.embedding.row(tok as usize) + &w.positional.row(t);
            site.row_mut(t).assign(&row);
        }
        apply_deltas(0, &mut site);

        let mut residual = Vec::with_capacity(n_layers + 1);
        let mut encoder_input = Vec::with_capacity(n_layers);
        let mut preacts = Vec::with_capacity(n_layers);
        let mut acts = Vec::with_capacity(n_layers);
        let mut scales = Vec::with_capacity(n_layers);
        let mut attn_caches = w.attention.as_ref().map(|_| Vec::with_capacity(n_layers));
        let mut errors = Vec::with_capacity(n_layers);
        // writes[s] accumulates every decoder write landing on site s + 1
        let mut writes: Vec<Array2<f64>> = (0..n_layers).map(|_| Array2::zeros((seq, d))).collect();

        for layer in 0..n_layers {
            let mut input = site.clone();
            if let (Some(heads), Some(caches)) = (&w.attention, attn_caches.as_mut()) {
                let head = &heads[layer];
                let qk_source = match cfg.attention {
                    AttentionKind::Positional => w.positional.slice(s![..seq, ..]).to_owned(),
                    _ => site.clone(),
                };
                let query = qk_source.dot(&head.query);
                let key = qk_source.dot(&head.key);
                let value = site.dot(&head.value);
                let scale = 1.0 / (d as f64).sqrt();
                let mut pattern = Array2::<f64>::zeros((seq, seq));
                for t in 0..seq {
                    let q = query.row(t);
                    let scores: Vec<f64> = (0..=t).map(|j| q.dot(&key.row(j)) * scale).collect();
                    let probs = softmax(scores.iter().copied());
                    for (j, p) in probs.into_iter().enumerate() {
                        pattern[[t, j]] = p;
                    }
                }
                let mixed = pattern.dot(&value).dot(&head.output);
                input += &mixed;
                caches.push(AttentionCache {
                    query,
                    key,
                    value,
                    pattern,
                });
            }

            let mut z = input.dot(&w.encoders[layer].t());
            z += &w.encoder_bias[layer];
            let mut a = z.mapv(|v| cfg.activation.apply(v));
            let mut scale = Array2::<f64>::ones((seq, n_feat));
            if let Some(patch) = opts.patch {
                let lo = FeatureOccurrence::new(layer, 0, 0);
                let hi = FeatureOccurrence::new(layer + 1, 0, 0);
                for (occ, action) in patch.actions.range(lo..hi) {
                    let idx = [occ.position, occ.feature];
                    match *action {
                        PatchAction::FreezeToCorrupted | PatchAction::FreezeToClean => {
                            // checked above
                            let r = opts.reference.expect("reference present");
                            a[idx] = r.act[layer][idx];
                            scale[idx] = 0.0;
                        }
                        PatchAction::Zero => {
                            a[idx] = 0.0;
                            scale[idx] = 0.0;
                        }
                        PatchAction::Amplify { scale: k } => {
                            a[idx] *= k;
                            scale[idx] = k;
                        }
                    }
                }
            }

            for receiver in layer..n_layers {
                if let Some(dec) = self.decoder(layer, receiver) {
                    writes[receiver] += &a.dot(dec);
                }
            }

            let err = match (cfg.error_mode, opts.frozen_errors, &w.error_maps) {
                (ErrorMode::FrozenError, Some(frozen), _) => frozen[layer].clone(),
                (ErrorMode::FrozenError, None, Some(maps)) => {
                    site.dot(&maps[layer]).mapv(|v| w.error_scale * v.tanh())
                }
                _ => Array2::zeros((seq, d)),
            };

            let mut next = &site + &writes[layer] + &err;
            apply_deltas(layer + 1, &mut next);
            residual.push(site);
            encoder_input.push(input);
            preacts.push(z);
            acts.push(a);
            scales.push(scale);
            errors.push(err);
            site = next;
        }

        let logits = site.dot(&w.unembedding);
        residual.push(site);

        Ok(RunTrace {
            tokens: tokens.to_vec(),
            residual,
            encoder_input,
            preact: preacts,
            act: acts,
            patch_scale: scales,
            attention: attn_caches,
            errors,
            logits,
        })
    }

    /// Mean fraction of active (feature, position) slots per layer.
    pub fn layer_density(&self, trace: &RunTrace) -> Vec<f64> {
        trace
            .act
            .iter()
            .map(|a| {
                let n = a.len().max(1) as f64;
                a.iter().filter(|v| **v != 0.0).count() as f64 / n
            })
            .collect()
    }

    /// Pre-activations of layer `layer` for a batch, without that layer's
    /// bias. Used when calibrating biases.
    pub(crate) fn raw_preactivations(&self, tokens: &[TokenId], layer: usize) -> Result<Array2<f64>> {
        let trace = self.forward(tokens, None, None)?;
        let z = &trace.preact[layer];
        let bias = &self.weights().encoder_bias[layer];
        Ok(z - &bias.view().insert_axis(Axis(0)))
    }
}
