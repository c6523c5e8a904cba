// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded construction of synthetic replacement models.
//!
//! Half of the encoder rows are aligned with a random token embedding, and
//! every same-layer decoder row echoes its encoder row. With the unembedding
//! tied to the embedding, a feature that fires because a token is present in
//! context pushes that token's logit up. This gives untrained models a
//! reliable copy tendency, which is what the clean/corrupted task pairs probe.

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    Activation, AttentionKind, AttentionWeights, ErrorMode, ModelConfig, ReplacementModel,
    TokenId, Weights,
};
use crate::error::Result;

const UNEMBED_SCALE: f64 = 4.0;
const ATTENTION_GAIN: f64 = 2.0;
const QK_SCALE: f64 = 0.5;
const ECHO_GAIN: f64 = 0.8;
const DECODER_NOISE: f64 = 0.25;
const CROSS_LAYER_GAIN: f64 = 0.35;
const ERROR_SCALE: f64 = 0.1;
const CALIBRATION_SEQS: usize = 64;
const CALIBRATION_LEN: usize = 12;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let x: f64 = StandardNormal.sample(rng);
        x * std
    })
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

pub(super) fn build(config: ModelConfig) -> Result<ReplacementModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (l, d, v, f) = (
        config.num_layers,
        config.d_model,
        config.vocab_size,
        config.features_per_layer,
    );
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let embedding = gaussian(&mut rng, v, d, inv_sqrt_d);
    let positional = gaussian(&mut rng, config.max_positions, d, 0.1 * inv_sqrt_d);
    let unembedding = embedding.t().to_owned() * UNEMBED_SCALE;

    let mut encoders = Vec::with_capacity(l);
    let mut decoders = Vec::with_capacity(l);
    for layer in 0..l {
        let mut enc = Array2::<f64>::zeros((f, d));
        for feat in 0..f {
            let noise = unit(gaussian(&mut rng, 1, d, 1.0).row(0).to_owned());
            let row = if rng.random_bool(0.5) {
                let tok = rng.random_range(0..v);
                unit(embedding.row(tok).to_owned() + noise * 0.3)
            } else {
                noise
            };
            enc.row_mut(feat).assign(&row);
        }
        let mut per_site = Vec::with_capacity(l - layer);
        for receiver in layer..l {
            let dec = if receiver == layer {
                enc.clone() * ECHO_GAIN + gaussian(&mut rng, f, d, DECODER_NOISE * inv_sqrt_d)
            } else {
                let decay = CROSS_LAYER_GAIN * 0.5f64.powi((receiver - layer - 1) as i32);
                gaussian(&mut rng, f, d, decay * inv_sqrt_d)
            };
            per_site.push(dec);
        }
        encoders.push(enc);
        decoders.push(per_site);
    }

    let attention = match config.attention {
        AttentionKind::None => None,
        AttentionKind::SingleHead | AttentionKind::Positional => Some(
            (0..l)
                .map(|_| AttentionWeights {
                    query: gaussian(&mut rng, d, d, QK_SCALE * inv_sqrt_d),
                    key: gaussian(&mut rng, d, d, QK_SCALE * inv_sqrt_d),
                    value: Array2::eye(d) + gaussian(&mut rng, d, d, 0.05 * inv_sqrt_d),
                    output: Array2::eye(d) * ATTENTION_GAIN
                        + gaussian(&mut rng, d, d, 0.05 * inv_sqrt_d),
                })
                .collect(),
        ),
    };

    let error_maps = match config.error_mode {
        ErrorMode::SyntheticExact => None,
        ErrorMode::FrozenError => Some((0..l).map(|_| gaussian(&mut rng, d, d, inv_sqrt_d)).collect()),
    };

    let calibration: Vec<Vec<TokenId>> = {
        let len = CALIBRATION_LEN.min(config.max_positions);
        let vocab: Vec<TokenId> = (0..v as TokenId).collect();
        (0..CALIBRATION_SEQS)
            .map(|_| (0..len).map(|_| *vocab.choose(&mut rng).expect("vocab >= 4")).collect())
            .collect()
    };

    let weights = Weights {
        embedding,
        positional,
        unembedding,
        encoders,
        encoder_bias: (0..l).map(|_| Array1::zeros(f)).collect(),
        decoders,
        attention,
        error_maps,
        error_scale: match config.error_mode {
            ErrorMode::SyntheticExact => 0.0,
            ErrorMode::FrozenError => ERROR_SCALE,
        },
    };
    let mut model = ReplacementModel::from_parts(config, weights)?;
    calibrate_biases(&mut model, &calibration)?;
    Ok(model)
}

/// Sets each encoder bias so that a `target_density` fraction of the
/// calibration slots land above the firing threshold. Layers are calibrated
/// in order because each layer reads the writes of the ones before it.
fn calibrate_biases(model: &mut ReplacementModel, batch: &[Vec<TokenId>]) -> Result<()> {
    let cfg = model.config().clone();
    let threshold = match cfg.activation {
        Activation::Relu => 0.0,
        Activation::JumpRelu { threshold } => threshold,
        // every slot is live under the identity; no bias needed
        Activation::Identity => return Ok(()),
    };
    for layer in 0..cfg.num_layers {
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); cfg.features_per_layer];
        for seq in batch {
            let z = model.raw_preactivations(seq, layer)?;
            for row in z.rows() {
                for (feat, value) in row.iter().enumerate() {
                    columns[feat].push(*value);
                }
            }
        }
        let bias = Array1::from_iter(columns.into_iter().map(|mut col| {
            col.sort_by(f64::total_cmp);
            let idx = (((1.0 - cfg.target_density) * col.len() as f64).floor() as usize)
                .clamp(1, col.len() - 1);
            // cut between two distinct values so no calibration slot sits on the
            // kink; positionwise layers repeat values exactly
            let lower = col[idx - 1];
            let cut = match col[idx..].iter().find(|&&v| v > lower) {
                Some(&upper) => 0.5 * (lower + upper),
                None => lower + 1e-3,
            };
            threshold - cut
        }));
        model.weights.encoder_bias[layer] = bias;
    }
    Ok(())
}
