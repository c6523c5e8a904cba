// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared fixtures for the pipeline benchmarks.

use pie_core::tasks::generate;
use pie_core::{ModelConfig, ReplacementModel, TaskDataset, TaskKind, Vocabulary};

/// A model of the given shape at 10% density, with `n` IOI-like prompts.
pub fn fixture(num_layers: usize, d_model: usize, features_per_layer: usize, n: usize) -> (ReplacementModel, TaskDataset) {
    let cfg = ModelConfig {
        num_layers,
        d_model,
        features_per_layer,
        vocab_size: 64,
        target_density: 0.1,
        ..ModelConfig::default()
    };
    let model = ReplacementModel::build(cfg).expect("bench model builds");
    let vocab = Vocabulary::synthetic(64).expect("vocabulary");
    let dataset = generate(TaskKind::IoiLike, n, 0, &vocab).expect("dataset");
    (model, dataset)
}
