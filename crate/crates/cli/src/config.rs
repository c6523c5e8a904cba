// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline configuration: a TOML file, then command-line overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use pie_core::attribution::AttributionOptions;
use pie_core::fixtures::{and_gate_dataset, and_gate_model};
use pie_core::interpretation::HttpConfig;
use pie_core::tasks::{generate, Vocabulary};
use pie_core::{
    FeatureId, GradientRun, InterpretConfig, Method, MetricKind, ModelConfig, ReplacementModel, SweepConfig, SynergyConfig,
    TaskDataset, TaskKind,
};

/// A configuration value is missing, malformed or inconsistent.
#[derive(Debug, Error)]
#[error("config error at `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl ToString) -> Self {
        Self {
            field: field.into(),
            message: message.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

pub const DEFAULT_BUDGETS: [usize; 4] = [8, 16, 32, 64];

fn default_methods() -> Vec<String> {
    Method::ALL.iter().map(|m| m.tag().to_string()).collect()
}

fn default_budgets() -> Vec<usize> {
    DEFAULT_BUDGETS.to_vec()
}

fn default_metric() -> String {
    "logit_difference".into()
}

fn default_gradient_run() -> String {
    "clean".into()
}

fn default_epsilon() -> f64 {
    pie_core::attribution::DEFAULT_LRP_EPSILON
}

fn default_out() -> PathBuf {
    PathBuf::from("pie-out")
}

/// Where the model comes from; exactly one field must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `small`, `default` or `planted_synergy`.
    pub preset: Option<String>,
    /// Seed override for `small` and `default`.
    pub seed: Option<u64>,
    pub file: Option<PathBuf>,
    pub config: Option<ModelConfig>,
}

fn default_count() -> usize {
    16
}

/// Where the prompt pairs come from; exactly one of `generator`, `path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// `ioi_like`, `docstring_like` or `planted_synergy`.
    pub generator: Option<String>,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    pub path: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            generator: Some("ioi_like".into()),
            count: default_count(),
            seed: 0,
            path: None,
        }
    }
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
}

fn default_percents() -> Vec<f64> {
    vec![20.0, 25.0, 30.0, 35.0, 40.0, 45.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_percents")]
    pub boundary_percents: Vec<f64>,
    /// Budget of the grid; the smallest configured budget when unset.
    pub k: Option<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            lambdas: default_lambdas(),
            boundary_percents: default_percents(),
            k: None,
        }
    }
}

fn default_seeds() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionSpec {
    pub k_ref: usize,
    pub budgets: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
}

fn default_corpus_size() -> usize {
    400
}

fn default_corpus_len() -> usize {
    12
}

fn default_c_feat() -> f64 {
    0.0235
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpretSpec {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_corpus_size")]
    pub corpus_size: usize,
    #[serde(default = "default_corpus_len")]
    pub corpus_len: usize,
    #[serde(default)]
    pub corpus_seed: u64,
    pub explainer_url: Option<String>,
    pub auditor_url: Option<String>,
    #[serde(default)]
    pub http: HttpConfig,
    #[serde(default)]
    pub params: InterpretConfig,
    /// Dollars per interpreted feature.
    #[serde(default = "default_c_feat")]
    pub c_feat: f64,
    /// Features the stub clients refuse, for exercising failure records.
    #[serde(default)]
    pub stub_fail: Vec<FeatureId>,
}

impl Default for InterpretSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            corpus_size: default_corpus_size(),
            corpus_len: default_corpus_len(),
            corpus_seed: 0,
            explainer_url: None,
            auditor_url: None,
            http: HttpConfig::default(),
            params: InterpretConfig::default(),
            c_feat: default_c_feat(),
            stub_fail: Vec::new(),
        }
    }
}

/// The file schema. Method, metric and gradient-run names stay strings
/// until [`PipelineConfig::validate`] so errors can name the field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "default_budgets")]
    pub budgets: Vec<usize>,
    #[serde(default)]
    pub synergy: SynergyConfig,
    #[serde(default = "default_metric")]
    pub metric: String,
    #[serde(default = "default_gradient_run")]
    pub gradient_run: String,
    #[serde(default = "default_epsilon")]
    pub lrp_epsilon: f64,
    /// Seed of random-active selection and the compression curve.
    #[serde(default)]
    pub seed: u64,
    /// Not part of the config hash.
    #[serde(default = "default_out", skip_serializing)]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub sweep: SweepSpec,
    pub compression: Option<CompressionSpec>,
    #[serde(default)]
    pub interpret: InterpretSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

/// Command-line values that replace file values when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub methods: Vec<String>,
    pub budgets: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub percents: Vec<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub metric: Option<String>,
    pub gradient_run: Option<String>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
}

impl PipelineConfig {
    /// Reads `path`, resolving relative file references against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new(path.display().to_string(), e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| {
            let message = e.message().to_string();
            ConfigError::new(format!("{}{}", path.display(), toml_location(&text, &e)), message)
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(f) = &cfg.model.file {
            cfg.model.file = Some(resolve(base, f));
        }
        if let Some(p) = &cfg.dataset.path {
            cfg.dataset.path = Some(resolve(base, p));
        }
        cfg.output_dir = resolve(base, &cfg.output_dir);
        Ok(cfg)
    }

    /// Applies overrides. `lambdas`/`percents` set the sweep grid; for the
    /// other commands a single value sets the synergy config.
    pub fn apply(&mut self, o: &Overrides) {
        if !o.methods.is_empty() {
            self.methods = o.methods.clone();
        }
        if !o.budgets.is_empty() {
            self.budgets = o.budgets.clone();
        }
        if !o.lambdas.is_empty() {
            self.sweep.lambdas = o.lambdas.clone();
            self.synergy.lambda = o.lambdas[0];
        }
        if !o.percents.is_empty() {
            self.sweep.boundary_percents = o.percents.clone();
            self.synergy.boundary_percent = o.percents[0];
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.output_dir = p.clone();
        }
        if let Some(m) = &o.metric {
            self.metric = m.clone();
        }
        if let Some(g) = &o.gradient_run {
            self.gradient_run = g.clone();
        }
    }

    pub fn parsed_methods(&self) -> Result<Vec<Method>> {
        if self.methods.is_empty() {
            return Err(ConfigError::new("methods", "at least one method is required"));
        }
        let methods = self
            .methods
            .iter()
            .enumerate()
            .map(|(i, m)| Method::from_str(m).map_err(|_| ConfigError::new(format!("methods[{i}]"), format!("unknown method `{m}`"))))
            .collect::<Result<Vec<_>>>()?;
        for (i, m) in methods.iter().enumerate() {
            if methods[..i].contains(m) {
                return Err(ConfigError::new(format!("methods[{i}]"), format!("duplicate method `{m}`")));
            }
        }
        Ok(methods)
    }

    pub fn attribution(&self) -> Result<AttributionOptions> {
        let metric = MetricKind::from_str(&self.metric).map_err(|e| ConfigError::new("metric", e))?;
        let gradient_run = GradientRun::from_str(&self.gradient_run).map_err(|e| ConfigError::new("gradient_run", e))?;
        if !(self.lrp_epsilon > 0.0 && self.lrp_epsilon.is_finite()) {
            return Err(ConfigError::new("lrp_epsilon", "must be a positive finite number"));
        }
        Ok(AttributionOptions {
            metric,
            gradient_run,
            lrp_epsilon: self.lrp_epsilon,
        })
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        self.synergy.validate().map_err(|e| ConfigError::new("synergy", e))?;
        Ok(SweepConfig {
            attribution: self.attribution()?,
            synergy: self.synergy,
            seed: self.seed,
        })
    }

    /// Checks every invariant reachable without loading files.
    pub fn validate(&self) -> Result<()> {
        self.parsed_methods()?;
        pie_core::fidelity::validate_budgets(&self.budgets).map_err(|e| ConfigError::new("budgets", e))?;
        self.sweep_config()?;
        self.interpret.params.validate().map_err(|e| ConfigError::new("interpret.params", e))?;
        if let Some(c) = &self.compression {
            if c.k_ref == 0 {
                return Err(ConfigError::new("compression.k_ref", "must be >= 1"));
            }
            pie_core::fidelity::validate_budgets(&c.budgets).map_err(|e| ConfigError::new("compression.budgets", e))?;
            if c.seeds == 0 {
                return Err(ConfigError::new("compression.seeds", "must be >= 1"));
            }
        }
        let set = [self.model.preset.is_some(), self.model.file.is_some(), self.model.config.is_some()];
        if set.iter().filter(|&&b| b).count() > 1 {
            return Err(ConfigError::new("model", "set only one of `preset`, `file`, `config`"));
        }
        match (&self.dataset.generator, &self.dataset.path) {
            (Some(_), Some(_)) => return Err(ConfigError::new("dataset", "set only one of `generator`, `path`")),
            (None, None) => return Err(ConfigError::new("dataset", "set `generator` or `path`")),
            (_, Some(p)) if !p.exists() => {
                return Err(ConfigError::new("dataset.path", format!("{} does not exist", p.display())));
            }
            _ => {}
        }
        if let Some(p) = &self.model.file {
            if !p.exists() {
                return Err(ConfigError::new("model.file", format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn load_model(&self) -> anyhow::Result<ReplacementModel> {
        let m = &self.model;
        if let Some(path) = &m.file {
            return Ok(ReplacementModel::load(path)?);
        }
        if let Some(cfg) = &m.config {
            return Ok(ReplacementModel::build(cfg.clone())?);
        }
        let preset = m.preset.as_deref().unwrap_or("default");
        let seeded = |mut c: ModelConfig| {
            if let Some(s) = m.seed {
                c.seed = s;
            }
            c
        };
        Ok(match preset {
            "small" => ReplacementModel::build(seeded(small_model_config()))?,
            "default" => ReplacementModel::build(seeded(default_model_config()))?,
            "planted_synergy" => and_gate_model()?.0,
            other => Err(ConfigError::new("model.preset", format!("unknown preset `{other}`")))?,
        })
    }

    pub fn load_dataset(&self, model: &ReplacementModel) -> anyhow::Result<TaskDataset> {
        let d = &self.dataset;
        if let Some(path) = &d.path {
            let ds = TaskDataset::load(path)?;
            for p in &ds.pairs {
                if p.max_token() as usize >= model.config().vocab_size {
                    Err(ConfigError::new("dataset.path", format!("pair `{}` uses tokens outside the model vocabulary", p.id)))?;
                }
            }
            return Ok(ds);
        }
        let generator = d.generator.as_deref().unwrap_or_default();
        if d.count == 0 {
            Err(ConfigError::new("dataset.count", "must be >= 1"))?;
        }
        Ok(match generator {
            "planted_synergy" => and_gate_dataset(d.count)?,
            name => {
                let task = TaskKind::from_str(name)
                    .ok()
                    .filter(|t| *t != TaskKind::Custom)
                    .ok_or_else(|| ConfigError::new("dataset.generator", format!("unknown generator `{name}`")))?;
                let vocab = Vocabulary::synthetic(model.config().vocab_size)?;
                generate(task, d.count, d.seed, &vocab)?
            }
        })
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// The default preset: the stock 3-layer model at 10% density. Sparser
/// builds leave most IOI pairs with no clean/corrupted gap at the last
/// position.
pub fn default_model_config() -> ModelConfig {
    ModelConfig {
        target_density: 0.1,
        ..ModelConfig::default()
    }
}

/// The small preset: 2 layers, 8 dims, 32 tokens, 16 features per layer.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 8,
        vocab_size: 32,
        features_per_layer: 16,
        seed: 0,
        target_density: 0.1,
        ..ModelConfig::default()
    }
}

fn toml_location(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start].matches('\n').count() + 1;
            format!(":{line}")
        }
        None => String::new(),
    }
}
