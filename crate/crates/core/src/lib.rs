// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prune-first interpretability over a desk-scale cross-layer transcoder.

pub mod attribution;
pub mod error;
pub mod fidelity;
pub mod fixtures;
pub mod interpretation;
pub mod model;
pub mod occurrence;
pub mod synergy;
pub mod tasks;

pub use error::{PieError, Result};
pub use model::{
    Activation, AttentionKind, ErrorMode, GradientCache, GradientRun, Metric, MetricKind,
    ModelConfig, PatchAction, PatchSpec, PropagationRule, ReplacementModel, RunTrace, TokenId,
};
pub use occurrence::{FeatureId, FeatureOccurrence};
pub use tasks::{PromptPair, TaskDataset, TaskKind, Vocabulary};
pub use attribution::{Circuit, Method, PromptContext, ScoreTable, UniqueFeatureSet};
pub use synergy::{SynergyConfig, ZBaseMode};
pub use fidelity::{Aggregate, CostEstimate, FidelityReport, SweepConfig, SweepResult};
pub use interpretation::{InterpretConfig, InterpretationRecord, InterpretationReport, QualityScores};
