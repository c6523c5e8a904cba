// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{AttentionKind, ReplacementModel, RunTrace, TokenId};
use crate::error::{PieError, Result};

/// Which scalar the attribution is taken against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    LogitDifference,
    NegativeKl,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LogitDifference => "logit_difference",
            Self::NegativeKl => "negative_kl",
        })
    }
}

impl FromStr for MetricKind {
    type Err = PieError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit_difference" | "logit-difference" => Ok(Self::LogitDifference),
            "negative_kl" | "negative-kl" => Ok(Self::NegativeKl),
            other => Err(PieError::Config(format!("unknown metric `{other}`"))),
        }
    }
}

/// Which run the cached gradient is taken on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientRun {
    #[default]
    Clean,
    Corrupted,
}

impl FromStr for GradientRun {
    type Err = PieError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Self::Clean),
            "corrupted" => Ok(Self::Corrupted),
            other => Err(PieError::Config(format!("unknown gradient run `{other}`"))),
        }
    }
}

/// A fully specified last-token metric.
#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    /// `logit[target] - logit[distractor]` at the last position.
    LogitDifference { target: TokenId, distractor: TokenId },
    /// `-KL(reference || q)` where `q` is the run's last-token distribution.
    NegativeKl { reference: Vec<f64> },
}

impl Metric {
    /// Resolves a metric kind against the arguments it needs.
    pub fn from_kind(
        kind: MetricKind,
        answer: Option<(TokenId, TokenId)>,
        reference: Option<&[f64]>,
    ) -> Result<Self> {
        match kind {
            MetricKind::LogitDifference => {
                let (target, distractor) = answer.ok_or_else(|| {
                    PieError::Argument("logit difference needs target and distractor tokens".into())
                })?;
                Ok(Self::LogitDifference { target, distractor })
            }
            MetricKind::NegativeKl => {
                let reference = reference.ok_or_else(|| {
                    PieError::Argument("negative KL needs a reference distribution".into())
                })?;
                Ok(Self::NegativeKl {
                    reference: reference.to_vec(),
                })
            }
        }
    }

    pub fn kind(&self) -> MetricKind {
        match self {
            Self::LogitDifference { .. } => MetricKind::LogitDifference,
            Self::NegativeKl { .. } => MetricKind::NegativeKl,
        }
    }

    pub fn evaluate(&self, trace: &RunTrace) -> f64 {
        let last = trace.len() - 1;
        match self {
            Self::LogitDifference { target, distractor } => {
                trace.logits[[last, *target as usize]] - trace.logits[[last, *distractor as usize]]
            }
            Self::NegativeKl { reference } => {
                -kl_divergence(reference, &trace.last_distribution())
            }
        }
    }

    /// `dM / dlogits` at the last position.
    fn logit_gradient(&self, trace: &RunTrace) -> Result<Array1<f64>> {
        let vocab = trace.logits.ncols();
        let mut grad = Array1::<f64>::zeros(vocab);
        match self {
            Self::LogitDifference { target, distractor } => {
                for tok in [*target, *distractor] {
                    if tok as usize >= vocab {
                        return Err(PieError::Argument(format!("token {tok} outside vocabulary")));
                    }
                }
                grad[*target as usize] += 1.0;
                grad[*distractor as usize] -= 1.0;
            }
            Self::NegativeKl { reference } => {
                if reference.len() != vocab {
                    return Err(PieError::Argument(format!(
                        "reference distribution has {} entries, vocabulary has {vocab}",
                        reference.len()
                    )));
                }
                let q = trace.last_distribution();
                for (g, (p, q)) in grad.iter_mut().zip(reference.iter().zip(q)) {
                    *g = p - q;
                }
            }
        }
        Ok(grad)
    }
}

/// `KL(p || q)` in nats. Terms with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p.ln() - q.ln()))
        .sum::<f64>()
        .max(0.0)
}

/// How coefficients are carried back from the metric to each site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationRule {
    /// Exact gradients.
    Gradient,
    /// LRP epsilon rule: each encoder nonlinearity passes `a / (z + eps*sign z)`
    /// instead of its derivative and attention patterns are held constant.
    LrpEpsilon { epsilon: f64 },
}

/// Per-site coefficient vectors for one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCache {
    /// `L + 1` entries of `T x d_model`; `sites[s]` is the coefficient of
    /// residual site `s`.
    sites: Vec<Array2<f64>>,
    metric: MetricKind,
    run: GradientRun,
    rule: PropagationRule,
}

impl GradientCache {
    pub fn site(&self, site: usize) -> &Array2<f64> {
        &self.sites[site]
    }

    pub fn at(&self, site: usize, position: usize) -> Array1<f64> {
        self.sites[site].row(position).to_owned()
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn metric(&self) -> MetricKind {
        self.metric
    }

    pub fn run(&self) -> GradientRun {
        self.run
    }

    pub fn rule(&self) -> PropagationRule {
        self.rule
    }

    pub fn is_finite(&self) -> bool {
        self.sites.iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn with_run(mut self, run: GradientRun) -> Self {
        self.run = run;
        self
    }
}

impl ReplacementModel {
    /// Exact gradient of `metric` with respect to every residual site of
    /// `trace`. Error terms are treated as constants.
    pub fn backward(&self, trace: &RunTrace, metric: &Metric) -> Result<GradientCache> {
        self.propagate(trace, metric, PropagationRule::Gradient)
    }

    /// Carries metric coefficients back to every site under `rule`.
    pub fn propagate(
        &self,
        trace: &RunTrace,
        metric: &Metric,
        rule: PropagationRule,
    ) -> Result<GradientCache> {
        if let PropagationRule::LrpEpsilon { epsilon } = rule {
            if !(epsilon > 0.0) {
                return Err(PieError::Config(format!("LRP epsilon must be > 0, got {epsilon}")));
            }
        }
        let n_layers = self.num_layers();
        if trace.residual.len() != n_layers + 1 || trace.residual[0].ncols() != self.d_model() {
            return Err(PieError::Shape("trace was not produced by this model".into()));
        }
        let w = self.weights();
        let act_fn = self.config().activation;
        let seq = trace.len();
        let d = self.d_model();

        let dlogits = metric.logit_gradient(trace)?;
        let mut sites: Vec<Array2<f64>> = (0..=n_layers).map(|_| Array2::zeros((seq, d))).collect();
        sites[n_layers]
            .row_mut(seq - 1)
            .assign(&w.unembedding.dot(&dlogits));

        for layer in (0..n_layers).rev() {
            // dM/da for every (position, feature) of this layer
            let mut grad_act = Array2::<f64>::zeros((seq, self.features_per_layer()));
            for receiver in layer..n_layers {
                if let Some(dec) = self.decoder(layer, receiver) {
                    grad_act += &sites[receiver + 1].dot(&dec.t());
                }
            }
            let z = &trace.preact[layer];
            let scale = &trace.patch_scale[layer];
            let local = match rule {
                PropagationRule::Gradient => {
                    ndarray::Zip::from(z).and(scale).map_collect(|&z, &k| k * act_fn.derivative(z))
                }
                PropagationRule::LrpEpsilon { epsilon } => ndarray::Zip::from(z)
                    .and(scale)
                    .map_collect(|&z, &k| {
                        let stab = if z >= 0.0 { z + epsilon } else { z - epsilon };
                        k * act_fn.apply(z) / stab
                    }),
            };
            let grad_pre = grad_act * local;
            let grad_input = grad_pre.dot(&w.encoders[layer]);

            let mut grad_site = sites[layer + 1].clone();
            grad_site += &grad_input;
            if let (Some(heads), Some(caches)) = (&w.attention, &trace.attention) {
                let head = &heads[layer];
                let cache = &caches[layer];
                let grad_mix = grad_input.dot(&head.output.t());
                let grad_value = cache.pattern.t().dot(&grad_mix);
                grad_site += &grad_value.dot(&head.value.t());
                // a positional pattern does not depend on the site
                if rule == PropagationRule::Gradient && self.config().attention == AttentionKind::SingleHead {
                    let scale = 1.0 / (d as f64).sqrt();
                    let mut grad_scores = Array2::<f64>::zeros((seq, seq));
                    for t in 0..seq {
                        let g_row = grad_mix.row(t);
                        let g_alpha: Vec<f64> =
                            (0..=t).map(|j| g_row.dot(&cache.value.row(j))).collect();
                        let mean: f64 = (0..=t).map(|j| cache.pattern[[t, j]] * g_alpha[j]).sum();
                        for j in 0..=t {
                            grad_scores[[t, j]] = cache.pattern[[t, j]] * (g_alpha[j] - mean) * scale;
                        }
                    }
                    let grad_query = grad_scores.dot(&cache.key);
                    let grad_key = grad_scores.t().dot(&cache.query);
                    grad_site += &grad_query.dot(&head.query.t());
                    grad_site += &grad_key.dot(&head.key.t());
                }
            }
            sites[layer] = grad_site;
        }

        Ok(GradientCache {
            sites,
            metric: metric.kind(),
            run: GradientRun::Clean,
            rule,
        })
    }

    /// `dM/da_f(t)` for every occurrence of `layer`: the sum over receiver
    /// sites of each decoder row contracted with the site coefficient.
    pub fn write_sensitivity(&self, cache: &GradientCache, layer: usize) -> Array2<f64> {
        let seq = cache.sites[0].nrows();
        let mut out = Array2::<f64>::zeros((seq, self.features_per_layer()));
        for receiver in layer..self.num_layers() {
            if let Some(dec) = self.decoder(layer, receiver) {
                out += &cache.sites[receiver + 1].dot(&dec.t());
            }
        }
        out
    }
}
