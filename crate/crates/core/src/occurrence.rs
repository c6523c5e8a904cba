// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;

use serde::{Deserialize, Serialize};

/// One feature instantiated at one token position of one prompt.
///
/// Field order gives the derived ordering: `(layer, feature, position)`
/// lexicographic. Budget tie-breaks rely on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureOccurrence {
    #[serde(rename = "l")]
    pub layer: usize,
    #[serde(rename = "f")]
    pub feature: usize,
    #[serde(rename = "t")]
    pub position: usize,
}

impl FeatureOccurrence {
    pub const fn new(layer: usize, feature: usize, position: usize) -> Self {
        Self {
            layer,
            feature,
            position,
        }
    }

    /// Projection onto the position-free dictionary entry.
    pub const fn feature_id(&self) -> FeatureId {
        FeatureId {
            layer: self.layer,
            index: self.feature,
        }
    }
}

impl fmt::Display for FeatureOccurrence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}@{}", self.layer, self.feature, self.position)
    }
}

/// A dictionary feature, independent of position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureId {
    #[serde(rename = "l")]
    pub layer: usize,
    #[serde(rename = "f")]
    pub index: usize,
}

impl FeatureId {
    pub const fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.index)
    }
}
