// SPDX-License-Identifier: MIT OR Apache-2.0

//! Desk-scale subject model and its cross-layer transcoder replacement.
//!
//! Residual sites are indexed `0..=L`: site 0 is the embedding, site `s + 1`
//! is the residual after layer `s`, and site `L` feeds the unembedding. Layer
//! `l` features read site `l` (optionally mixed across positions by a fixed
//! attention head) and decoder `D^{l->s}` writes into site `s + 1` for every
//! `s >= l`. A write therefore lands strictly downstream of the features that
//! produced it.

mod backward;
mod build;
mod config;
mod forward;
mod io;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub use backward::{kl_divergence, GradientCache, GradientRun, Metric, MetricKind, PropagationRule};
pub use config::{Activation, AttentionKind, ErrorMode, ModelConfig};
pub use forward::{ErrorTerms, ForwardOptions, PatchAction, PatchSpec, RunTrace, SiteDelta};
pub use io::ModelFile;

use crate::error::{PieError, Result};

/// Token ids index rows of the embedding.
pub type TokenId = u32;

/// Fixed query/key/value/output maps of one attention head, applied to row
/// vectors (`x · W`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Array2<f64>,
}

/// Every learned-looking parameter of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    /// `vocab_size x d_model`
    pub embedding: Array2<f64>,
    /// `max_positions x d_model`
    pub positional: Array2<f64>,
    /// `d_model x vocab_size`
    pub unembedding: Array2<f64>,
    /// Per layer, `F x d_model`.
    pub encoders: Vec<Array2<f64>>,
    /// Per layer, length `F`.
    pub encoder_bias: Vec<Array1<f64>>,
    /// `decoders[l][s - l]` is `D^{l->s}`, `F x d_model`, for `s` in `l..L`.
    pub decoders: Vec<Vec<Array2<f64>>>,
    /// One head per layer when attention is enabled.
    pub attention: Option<Vec<AttentionWeights>>,
    /// Per layer `d_model x d_model` map of the subject-only error path.
    pub error_maps: Option<Vec<Array2<f64>>>,
    #[serde(default)]
    pub error_scale: f64,
}

/// Immutable model; safe to share across worker threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementModel {
    config: ModelConfig,
    weights: Weights,
}

impl ReplacementModel {
    /// Draws a model from `config.seed`. Same config, same weights, bit for bit.
    pub fn build(config: ModelConfig) -> Result<Self> {
        build::build(config)
    }

    /// Assembles a model from explicit weights after checking every shape.
    pub fn from_parts(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        check_weights(&config, &weights)?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn features_per_layer(&self) -> usize {
        self.config.features_per_layer
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Decoder `D^{l->s}`, present iff `s >= l`.
    pub fn decoder(&self, layer: usize, site: usize) -> Option<&Array2<f64>> {
        if site < layer || site >= self.num_layers() {
            return None;
        }
        self.weights.decoders.get(layer)?.get(site - layer)
    }

    /// `(l, s)` pairs for which a decoder exists, in order.
    pub fn decoder_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.num_layers();
        (0..n)
            .flat_map(|l| (l..n).map(move |s| (l, s)))
            .filter(|&(l, s)| self.decoder(l, s).is_some())
            .collect()
    }

    /// Total number of dictionary features, `L * F`.
    pub fn dictionary_size(&self) -> usize {
        self.num_layers() * self.features_per_layer()
    }

    /// Stable short hash of the config and weights, used to tag outputs.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).unwrap_or_default());
        hasher.update(serde_json::to_vec(&self.weights).unwrap_or_default());
        hex::encode(hasher.finalize())[..16].to_string()
    }
}

fn check_weights(cfg: &ModelConfig, w: &Weights) -> Result<()> {
    let (l, d, v, f) = (
        cfg.num_layers,
        cfg.d_model,
        cfg.vocab_size,
        cfg.features_per_layer,
    );
    let expect = |name: &str, got: (usize, usize), want: (usize, usize)| -> Result<()> {
        if got == want {
            Ok(())
        } else {
            Err(PieError::Shape(format!(
                "{name}: expected {want:?}, got {got:?}"
            )))
        }
    };
    expect("embedding", w.embedding.dim(), (v, d))?;
    expect("positional", w.positional.dim(), (cfg.max_positions, d))?;
    expect("unembedding", w.unembedding.dim(), (d, v))?;
    if w.encoders.len() != l || w.encoder_bias.len() != l || w.decoders.len() != l {
        return Err(PieError::Shape(format!(
            "expected {l} encoder/bias/decoder layers"
        )));
    }
    for layer in 0..l {
        expect(&format!("encoder[{layer}]"), w.encoders[layer].dim(), (f, d))?;
        if w.encoder_bias[layer].len() != f {
            return Err(PieError::Shape(format!("encoder_bias[{layer}] must have {f} entries")));
        }
        if w.decoders[layer].len() != l - layer {
            return Err(PieError::Shape(format!(
                "decoders[{layer}] must hold {} receiver sites",
                l - layer
            )));
        }
        for (offset, dec) in w.decoders[layer].iter().enumerate() {
            expect(&format!("decoder[{layer}->{}]", layer + offset), dec.dim(), (f, d))?;
        }
    }
    match (cfg.attention, &w.attention) {
        (AttentionKind::None, None) => {}
        (AttentionKind::SingleHead | AttentionKind::Positional, Some(heads)) if heads.len() == l => {
            for (layer, head) in heads.iter().enumerate() {
                for (name, m) in [
                    ("query", &head.query),
                    ("key", &head.key),
                    ("value", &head.value),
                    ("output", &head.output),
                ] {
                    expect(&format!("attention[{layer}].{name}"), m.dim(), (d, d))?;
                }
            }
        }
        _ => {
            return Err(PieError::Shape(
                "attention weights do not match the attention kind".into(),
            ))
        }
    }
    match (cfg.error_mode, &w.error_maps) {
        (ErrorMode::SyntheticExact, None) => {}
        (ErrorMode::FrozenError, Some(maps)) if maps.len() == l => {
            for (layer, m) in maps.iter().enumerate() {
                expect(&format!("error_maps[{layer}]"), m.dim(), (d, d))?;
            }
        }
        _ => {
            return Err(PieError::Shape(
                "error maps do not match the error mode".into(),
            ))
        }
    }
    Ok(())
}
