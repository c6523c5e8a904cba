// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-built models whose interactions are known in closed form.
//!
//! All three use ReLU or identity features without attention, a 4-dim
//! residual with basis `e0..e3`, and logit difference read off `e0` (target
//! column `e0`, distractor column zero).

use ndarray::{Array1, Array2};

use crate::error::Result;
use crate::model::{Activation, AttentionKind, ErrorMode, ModelConfig, ReplacementModel, TokenId, Weights};
use crate::occurrence::FeatureOccurrence;
use crate::tasks::{DatasetMeta, PromptPair, TaskDataset, TaskKind};

const D: usize = 4;

/// Token with a zero embedding; stands in for every corrupted input.
pub const NULL_TOKEN: TokenId = 0;
pub const TARGET_TOKEN: TokenId = 1;
pub const DISTRACTOR_TOKEN: TokenId = 2;
/// First token whose embedding drives the layer-0 features.
pub const FIRST_INPUT_TOKEN: TokenId = 3;

/// Named occurrences of the AND-gate fixture, all at the last position.
#[derive(Debug, Clone, Copy)]
pub struct AndGateRoles {
    pub strong: [FeatureOccurrence; 3],
    pub weak: FeatureOccurrence,
    pub solo: FeatureOccurrence,
    pub dim: [FeatureOccurrence; 5],
    pub gate: FeatureOccurrence,
    pub inhibitor: FeatureOccurrence,
}

const AND_GATE_FEATURES: usize = 10;
/// Output gain of the two layer-1 features.
pub const GATE_GAIN: f64 = 5.0;

fn basis(i: usize) -> Array1<f64> {
    let mut v = Array1::zeros(D);
    v[i] = 1.0;
    v
}

fn empty_weights(cfg: &ModelConfig) -> Weights {
    let (l, v, f) = (cfg.num_layers, cfg.vocab_size, cfg.features_per_layer);
    let mut unembedding = Array2::zeros((D, v));
    unembedding[[0, TARGET_TOKEN as usize]] = 1.0;
    Weights {
        embedding: Array2::zeros((v, D)),
        positional: Array2::zeros((cfg.max_positions, D)),
        unembedding,
        encoders: (0..l).map(|_| Array2::zeros((f, D))).collect(),
        // unused features never fire
        encoder_bias: (0..l).map(|_| Array1::from_elem(f, -1.0)).collect(),
        decoders: (0..l).map(|layer| (layer..l).map(|_| Array2::zeros((f, D))).collect()).collect(),
        attention: None,
        error_maps: None,
        error_scale: 0.0,
    }
}

fn fixture_config(features: usize, vocab: usize, activation: Activation) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: D,
        vocab_size: vocab,
        features_per_layer: features,
        activation,
        attention: AttentionKind::None,
        error_mode: ErrorMode::SyntheticExact,
        seed: 0,
        max_positions: 8,
        ..ModelConfig::default()
    }
}

fn set_feature(w: &mut Weights, layer: usize, f: usize, reads: Array1<f64>, bias: f64, writes: Array1<f64>) {
    w.encoders[layer].row_mut(f).assign(&reads);
    w.encoder_bias[layer][f] = bias;
    w.decoders[layer][0].row_mut(f).assign(&writes);
}

/// Input tokens of the AND-gate vocabulary and their embedding scales,
/// spread evenly over `[0.9, 1.1]`.
pub const AND_GATE_INPUTS: usize = 33;

pub fn and_gate_scale(input: usize) -> f64 {
    0.9 + 0.2 * input as f64 / (AND_GATE_INPUTS - 1) as f64
}

/// A weak feature `B` whose write only pays off together with one of the
/// strong features `A_i`: the layer-1 gate needs `0.6` along `e1`, `B`
/// supplies `0.5` and each `A_i` `0.3`. An inhibitor with a higher threshold
/// cancels the gate's marginal slope on the clean run, so first-order
/// attribution sees only the direct `e0` writes and ranks `B` below the
/// unrelated `C`.
///
/// Layer 0 (all read `e3`; clean activation `alpha`, except `B` at
/// `alpha / 2`):
/// `A1..A3` write `0.3 e1 + e0`, `B` writes `e1 + 0.4 e0`, `C` writes
/// `0.9 e0`, `D1..D5` write `0.2 e1 + 0.05 e0`.
/// Layer 1: the gate reads `e1` with bias `-0.6` and writes `+5 e0`; the
/// inhibitor reads `e1` with bias `-1.3` and writes `-5 e0`.
pub fn and_gate_model() -> Result<(ReplacementModel, AndGateRoles)> {
    let cfg = fixture_config(AND_GATE_FEATURES, FIRST_INPUT_TOKEN as usize + AND_GATE_INPUTS, Activation::Relu);
    let mut w = empty_weights(&cfg);
    for i in 0..AND_GATE_INPUTS {
        w.embedding
            .row_mut(FIRST_INPUT_TOKEN as usize + i)
            .assign(&(basis(3) * and_gate_scale(i)));
    }
    let (e0, e1, e3) = (basis(0), basis(1), basis(3));
    for a in 0..3 {
        set_feature(&mut w, 0, a, e3.clone(), 0.0, &e1 * 0.3 + &e0);
    }
    set_feature(&mut w, 0, 3, &e3 * 0.5, 0.0, &e1 * 1.0 + &e0 * 0.4);
    set_feature(&mut w, 0, 4, e3.clone(), 0.0, &e0 * 0.9);
    for d in 5..10 {
        set_feature(&mut w, 0, d, e3.clone(), 0.0, &e1 * 0.2 + &e0 * 0.05);
    }
    set_feature(&mut w, 1, 0, e1.clone(), -0.6, &e0 * GATE_GAIN);
    set_feature(&mut w, 1, 1, e1.clone(), -1.3, &e0 * -GATE_GAIN);

    let model = ReplacementModel::from_parts(cfg, w)?;
    let at = |l, f| FeatureOccurrence::new(l, f, 1);
    Ok((
        model,
        AndGateRoles {
            strong: [at(0, 0), at(0, 1), at(0, 2)],
            weak: at(0, 3),
            solo: at(0, 4),
            dim: [at(0, 5), at(0, 6), at(0, 7), at(0, 8), at(0, 9)],
            gate: at(1, 0),
            inhibitor: at(1, 1),
        },
    ))
}

/// `n` two-token pairs `[null, x_i]` vs `[null, null]`, cycling through the
/// input tokens so the embedding scale sweeps `[0.9, 1.1]`.
pub fn and_gate_dataset(n: usize) -> Result<TaskDataset> {
    let pairs = (0..n)
        .map(|i| {
            let tok = FIRST_INPUT_TOKEN + (i % AND_GATE_INPUTS) as TokenId;
            PromptPair::new(
                format!("and-{i:03}"),
                vec![NULL_TOKEN, tok],
                vec![NULL_TOKEN, NULL_TOKEN],
                TARGET_TOKEN,
                DISTRACTOR_TOKEN,
                TaskKind::Custom,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    TaskDataset::new(
        pairs,
        DatasetMeta {
            vocabulary: None,
            provenance: format!("planted and-gate fixture n={n}"),
        },
    )
}

/// Named occurrences of the redundancy fixture.
#[derive(Debug, Clone, Copy)]
pub struct DuplicateRoles {
    pub first: FeatureOccurrence,
    pub second: FeatureOccurrence,
    pub linear: [FeatureOccurrence; 4],
    pub rise: FeatureOccurrence,
    pub cap: FeatureOccurrence,
}

/// Two features `P`, `Q` push the same direction `e1` into a saturating
/// readout `relu(x) - relu(x - 1)`, so restoring both recovers less than the
/// sum of restoring each. `P` and `Q` also write `0.7 e0` and `1.1 e0`, and
/// four purely linear features `R1..R4` write `1.0, 0.8, 0.5, 0.3` of `e0`.
pub fn duplicate_model() -> Result<(ReplacementModel, DuplicateRoles)> {
    let cfg = fixture_config(6, 4, Activation::Relu);
    let mut w = empty_weights(&cfg);
    w.embedding.row_mut(FIRST_INPUT_TOKEN as usize).assign(&basis(3));
    let (e0, e1, e3) = (basis(0), basis(1), basis(3));
    set_feature(&mut w, 0, 0, e3.clone(), 0.0, &e1 * 0.6 + &e0 * 0.7);
    set_feature(&mut w, 0, 1, e3.clone(), 0.0, &e1 * 0.6 + &e0 * 1.1);
    for (f, g) in [1.0, 0.8, 0.5, 0.3].into_iter().enumerate() {
        set_feature(&mut w, 0, 2 + f, e3.clone(), 0.0, &e0 * g);
    }
    set_feature(&mut w, 1, 0, e1.clone(), 0.0, e0.clone());
    set_feature(&mut w, 1, 1, e1.clone(), -1.0, -&e0);
    let at = |l, f| FeatureOccurrence::new(l, f, 1);
    Ok((
        ReplacementModel::from_parts(cfg, w)?,
        DuplicateRoles {
            first: at(0, 0),
            second: at(0, 1),
            linear: [at(0, 2), at(0, 3), at(0, 4), at(0, 5)],
            rise: at(1, 0),
            cap: at(1, 1),
        },
    ))
}

/// The single pair `[null, x]` vs `[null, null]` shared by the redundancy and
/// disjoint-path fixtures.
pub fn single_pair(id: &str) -> PromptPair {
    PromptPair::new(
        id,
        vec![NULL_TOKEN, FIRST_INPUT_TOKEN],
        vec![NULL_TOKEN, NULL_TOKEN],
        TARGET_TOKEN,
        DISTRACTOR_TOKEN,
        TaskKind::Custom,
    )
    .expect("valid fixture pair")
}

/// Two identity features on separate axes: one reads `e3` and writes `e0`,
/// the other reads `e2` and writes `e1`; the target column reads `e0 + e1`.
/// With no nonlinearity and no shared direction their restorations add.
pub fn disjoint_linear_model() -> Result<(ReplacementModel, [FeatureOccurrence; 2])> {
    let cfg = fixture_config(2, 4, Activation::Identity);
    let mut w = empty_weights(&cfg);
    w.encoder_bias = (0..2).map(|_| Array1::zeros(2)).collect();
    w.embedding
        .row_mut(FIRST_INPUT_TOKEN as usize)
        .assign(&(basis(3) * 0.8 + basis(2) * 1.3));
    w.unembedding[[1, TARGET_TOKEN as usize]] = 1.0;
    set_feature(&mut w, 0, 0, basis(3), 0.0, basis(0) * 1.5);
    set_feature(&mut w, 0, 1, basis(2), 0.0, basis(1) * -0.7);
    Ok((
        ReplacementModel::from_parts(cfg, w)?,
        [FeatureOccurrence::new(0, 0, 1), FeatureOccurrence::new(0, 1, 1)],
    ))
}

/// Named occurrences of the cancellation fixture.
#[derive(Debug, Clone, Copy)]
pub struct CancellingRoles {
    pub plus: FeatureOccurrence,
    pub minus: FeatureOccurrence,
    pub small: FeatureOccurrence,
}

/// Three identity features reading `e3`: `plus` writes `+5 e0`, `minus`
/// writes `-5 e0`, `small` writes `+1 e0`. The clean logit difference is 1,
/// reproduced exactly by `{small}` but overshot by `{small, plus}`.
pub fn cancelling_model() -> Result<(ReplacementModel, CancellingRoles)> {
    let cfg = fixture_config(3, 4, Activation::Identity);
    let mut w = empty_weights(&cfg);
    w.encoder_bias = (0..2).map(|_| Array1::zeros(3)).collect();
    w.embedding.row_mut(FIRST_INPUT_TOKEN as usize).assign(&basis(3));
    for (f, g) in [5.0, -5.0, 1.0].into_iter().enumerate() {
        set_feature(&mut w, 0, f, basis(3), 0.0, basis(0) * g);
    }
    let at = |f| FeatureOccurrence::new(0, f, 1);
    Ok((
        ReplacementModel::from_parts(cfg, w)?,
        CancellingRoles {
            plus: at(0),
            minus: at(1),
            small: at(2),
        },
    ))
}

/// Token the marker model's feature `L0.0` fires on.
pub const MARKER_TOKEN: TokenId = 5;

/// Two layers of 3 features over a 4-dim residual and 8 tokens; layer 1
/// never fires. In layer 0 feature 0 fires only on [`MARKER_TOKEN`]
/// (embedding `2 e2`, bias -0.5), feature 1 reads `e1 = t / 8` for token `t`,
/// and feature 2 never fires.
pub fn marker_model() -> Result<ReplacementModel> {
    let cfg = ModelConfig {
        num_layers: 2,
        d_model: D,
        vocab_size: 8,
        features_per_layer: 3,
        activation: Activation::Relu,
        attention: AttentionKind::None,
        error_mode: ErrorMode::SyntheticExact,
        seed: 0,
        max_positions: 8,
        ..ModelConfig::default()
    };
    let mut embedding = Array2::zeros((8, D));
    for t in 1..8 {
        embedding[[t, 1]] = t as f64 / 8.0;
    }
    embedding[[MARKER_TOKEN as usize, 2]] = 2.0;
    let mut enc = Array2::zeros((3, D));
    enc[[0, 2]] = 1.0;
    enc[[1, 1]] = 1.0;
    let mut unembedding = Array2::zeros((D, 8));
    unembedding[[0, 1]] = 1.0;
    let w = Weights {
        embedding,
        positional: Array2::zeros((8, D)),
        unembedding,
        encoders: vec![enc, Array2::zeros((3, D))],
        encoder_bias: vec![Array1::from(vec![-0.5, 0.0, -1.0]), Array1::from_elem(3, -1.0)],
        decoders: vec![vec![Array2::zeros((3, D)); 2], vec![Array2::zeros((3, D))]],
        attention: None,
        error_maps: None,
        error_scale: 0.0,
    };
    ReplacementModel::from_parts(cfg, w)
}
