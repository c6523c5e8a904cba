// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{PieError, Result};

/// Nonlinearity applied to encoder pre-activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `a = z` when `z > threshold`, else 0.
    JumpRelu { threshold: f64 },
    /// No nonlinearity. Every map from activations to logits is affine, which
    /// makes first-order attribution exact.
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Self::Relu => z.max(0.0),
            Self::JumpRelu { threshold } => {
                if z > threshold {
                    z
                } else {
                    0.0
                }
            }
            Self::Identity => z,
        }
    }

    /// Local derivative. The jump of JumpReLU is ignored (straight-through on
    /// the active branch only).
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::JumpRelu { threshold } => {
                if z > threshold {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    None,
    /// Causal single-head attention with fixed weights. Its output feeds the
    /// encoders only, so residual sites remain a pure sum of feature writes.
    SingleHead,
    /// As `SingleHead`, but queries and keys read the positional embeddings
    /// instead of the residual, so the pattern is the same for every input
    /// and an identity-activation model stays linear.
    Positional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// Subject model and replacement model coincide; error terms are zero.
    SyntheticExact,
    /// The subject model carries an extra per-layer map the dictionary does
    /// not capture. Replacement runs add that map's output as a constant
    /// recorded on an unpatched reference run.
    FrozenError,
}

fn default_max_positions() -> usize {
    32
}

fn default_density() -> f64 {
    0.05
}

/// Shape and seed of a synthetic replacement model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub features_per_layer: usize,
    pub activation: Activation,
    pub attention: AttentionKind,
    pub error_mode: ErrorMode,
    pub seed: u64,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    /// Fraction of (feature, position) slots that fire on random token
    /// sequences; encoder biases are calibrated to hit it.
    #[serde(default = "default_density")]
    pub target_density: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            d_model: 16,
            vocab_size: 64,
            features_per_layer: 64,
            activation: Activation::Relu,
            attention: AttentionKind::SingleHead,
            error_mode: ErrorMode::SyntheticExact,
            seed: 0,
            max_positions: default_max_positions(),
            target_density: default_density(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(PieError::Config(msg));
        if self.num_layers < 2 {
            return fail(format!("num_layers must be >= 2, got {}", self.num_layers));
        }
        if self.d_model < 2 {
            return fail(format!("d_model must be >= 2, got {}", self.d_model));
        }
        if self.features_per_layer < 1 {
            return fail("features_per_layer must be >= 1".into());
        }
        if self.vocab_size < 4 {
            return fail(format!("vocab_size must be >= 4, got {}", self.vocab_size));
        }
        if self.max_positions < 1 {
            return fail("max_positions must be >= 1".into());
        }
        if let Activation::JumpRelu { threshold } = self.activation {
            if !(threshold >= 0.0) {
                return fail(format!("jump_relu threshold must be >= 0, got {threshold}"));
            }
        }
        if !(self.target_density > 0.0 && self.target_density < 1.0) {
            return fail(format!(
                "target_density must lie in (0, 1), got {}",
                self.target_density
            ));
        }
        Ok(())
    }
}
