// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ReplacementModel, Weights};
use crate::error::{PieError, Result};

const FORMAT: &str = "pie-replacement-model";
const VERSION: u32 = 1;

/// Self-describing JSON model file. Without `weights` the model is rebuilt
/// from `config.seed`; with them, weights are taken verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Weights>,
}

impl ModelFile {
    pub fn from_model(model: &ReplacementModel, explicit_weights: bool) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config().clone(),
            weights: explicit_weights.then(|| model.weights().clone()),
        }
    }

    pub fn into_model(self) -> Result<ReplacementModel> {
        if self.format != FORMAT {
            return Err(PieError::parse("model file", "format", format!("expected `{FORMAT}`")));
        }
        if self.version != VERSION {
            return Err(PieError::parse(
                "model file",
                "version",
                format!("unsupported version {}", self.version),
            ));
        }
        match self.weights {
            Some(w) => ReplacementModel::from_parts(self.config, w),
            None => ReplacementModel::build(self.config),
        }
    }
}

impl ReplacementModel {
    pub fn save(&self, path: impl AsRef<Path>, explicit_weights: bool) -> Result<()> {
        let file = ModelFile::from_model(self, explicit_weights);
        fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: ModelFile = serde_json::from_str(&text)?;
        file.into_model()
    }
}
