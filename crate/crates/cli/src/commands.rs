// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use pie_core::attribution::unique_union;
use pie_core::fidelity::{
    estimate_cost, evaluate_circuits, prune_dataset, report_ratio, run_compression_curve, run_synergy_grid,
    CostCounts, PromptFidelity,
};
use pie_core::interpretation::{
    run_interpretation, AuditorClient, ExplainerClient, HttpAuditor, HttpExplainer, StubAuditor, StubExplainer,
};
use pie_core::tasks::random_corpus;
use pie_core::{Circuit, FidelityReport, Method, ReplacementModel, TaskDataset, UniqueFeatureSet};

use crate::config::{ConfigError, PipelineConfig};
use crate::output::{num, opt, read_jsonl, union_rows, write_jsonl, Table, UnionRow};

pub const CIRCUITS: &str = "circuits.jsonl";
pub const CIRCUITS_CSV: &str = "circuits.csv";
pub const SCORES: &str = "scores.jsonl";
pub const UNION: &str = "union.jsonl";
pub const AUDIT: &str = "synergy_audit.jsonl";
pub const FIDELITY_CSV: &str = "fidelity.csv";
pub const FIDELITY_PROMPTS: &str = "fidelity_prompts.jsonl";
pub const COMPRESSION_CSV: &str = "compression.csv";
pub const INTERPRETATION: &str = "interpretation.jsonl";
pub const INTERPRETATION_CSV: &str = "interpretation.csv";
pub const SWEEP_CSV: &str = "sweep.csv";

/// A validated config with its model and dataset loaded.
pub struct Session {
    pub cfg: PipelineConfig,
    pub hash: String,
    pub model: ReplacementModel,
    pub dataset: TaskDataset,
}

impl Session {
    pub fn open(cfg: PipelineConfig) -> anyhow::Result<Self> {
        cfg.validate()?;
        let model = cfg.load_model()?;
        let dataset = cfg.load_dataset(&model)?;
        fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
        Ok(Self {
            hash: cfg.hash(),
            cfg,
            model,
            dataset,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }
}

#[derive(Serialize)]
struct UnionLine {
    method: Method,
    k: usize,
    #[serde(flatten)]
    row: UnionRow,
}

pub fn prune(s: &Session) -> anyhow::Result<()> {
    let methods = s.cfg.parsed_methods()?;
    let pruning = prune_dataset(&s.model, &s.dataset, &methods, &s.cfg.budgets, &s.cfg.sweep_config()?)?;
    let circuits: Vec<&Circuit> = pruning.iter().flat_map(|p| p.circuits.iter()).collect();
    write_jsonl(&s.path(CIRCUITS), "prune", &s.hash, &circuits)?;

    let mut table = Table::new("prune", &s.hash, &[], &["prompt_id", "method", "k", "rank", "l", "f", "t", "score"])?;
    for c in &circuits {
        for (rank, r) in c.retained.iter().enumerate() {
            let o = r.occurrence;
            table.row([
                c.prompt_id.clone(),
                c.method.tag().to_string(),
                c.k.to_string(),
                (rank + 1).to_string(),
                o.layer.to_string(),
                o.feature.to_string(),
                o.position.to_string(),
                num(r.score),
            ])?;
        }
    }
    table.save(&s.path(CIRCUITS_CSV))?;

    let scores = pruning.iter().flat_map(|p| p.scores.iter().flat_map(|t| t.records()));
    write_jsonl(&s.path(SCORES), "prune", &s.hash, scores)?;
    write_jsonl(&s.path(AUDIT), "prune", &s.hash, pruning.iter().flat_map(|p| p.audit.iter()))?;

    let mut unions = Vec::new();
    for &m in &methods {
        for &k in &s.cfg.budgets {
            let set = unique_union(circuits.iter().copied().filter(|c| c.method == m && c.k == k));
            unions.extend(union_rows(&set).into_iter().map(|row| UnionLine { method: m, k, row }));
        }
    }
    write_jsonl(&s.path(UNION), "prune", &s.hash, &unions)?;
    eprintln!(
        "pruned {} prompts x {} methods x {} budgets -> {}",
        s.dataset.pairs.len(),
        methods.len(),
        s.cfg.budgets.len(),
        s.cfg.output_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PromptLine<'a> {
    method: Method,
    k: usize,
    #[serde(flatten)]
    row: &'a PromptFidelity,
}

pub fn fidelity_table(hash: &str, reports: &[FidelityReport]) -> anyhow::Result<Table> {
    let mut table = Table::new(
        "evaluate",
        hash,
        &[],
        &["method", "k", "n_prompts", "n_degenerate", "mean_kl", "std_kl", "mean_faithfulness", "std_faithfulness", "pcr"],
    )?;
    for r in reports {
        let a = &r.aggregate;
        table.row([
            r.method.tag().to_string(),
            r.k.to_string(),
            a.n_prompts.to_string(),
            a.n_degenerate.to_string(),
            num(a.mean_kl),
            num(a.std_kl),
            num(a.mean_faith),
            num(a.std_faith),
            num(a.pcr),
        ])?;
    }
    Ok(table)
}

pub fn evaluate(s: &Session, circuits_path: Option<&Path>) -> anyhow::Result<()> {
    let path = circuits_path.map(Path::to_path_buf).unwrap_or_else(|| s.path(CIRCUITS));
    let circuits: Vec<Circuit> = read_jsonl(&path)?;
    let reports = evaluate_circuits(&s.model, &s.dataset, &circuits)?;
    fidelity_table(&s.hash, &reports)?.save(&s.path(FIDELITY_CSV))?;
    let lines = reports.iter().flat_map(|r| {
        r.prompts.iter().map(|row| PromptLine {
            method: r.method,
            k: r.k,
            row,
        })
    });
    write_jsonl(&s.path(FIDELITY_PROMPTS), "evaluate", &s.hash, lines)?;

    if let Some(c) = &s.cfg.compression {
        let curve = run_compression_curve(
            &s.model,
            &s.dataset,
            c.k_ref,
            &c.budgets,
            c.seeds,
            s.cfg.seed,
            &s.cfg.attribution()?,
        )?;
        let notes = vec![
            format!("k_ref={} fap_mean_kl={} fap_std_kl={}", curve.k_ref, num(curve.fap_mean_kl), num(curve.fap_std_kl)),
            format!(
                "k_cross={} ratio={} seeds={}",
                curve.k_cross.map(|k| k.to_string()).unwrap_or_else(|| "none".into()),
                curve.crossover_ratio().map(report_ratio).unwrap_or_else(|| "none".into()),
                curve.seeds
            ),
        ];
        let mut table = Table::new("evaluate", &s.hash, &notes, &["k", "mean_kl", "std_kl"])?;
        for p in &curve.points {
            table.row([p.k.to_string(), num(p.mean_kl), num(p.std_kl)])?;
        }
        table.save(&s.path(COMPRESSION_CSV))?;
    }
    eprintln!("evaluated {} circuits in {} groups", circuits.len(), reports.len());
    Ok(())
}

#[derive(serde::Deserialize)]
struct UnionInput {
    method: Option<String>,
    k: Option<usize>,
    #[serde(flatten)]
    row: UnionRow,
}

/// Feature union from a prune output file, optionally restricted to one
/// method and budget.
pub fn read_union(path: &Path, method: Option<Method>, k: Option<usize>) -> anyhow::Result<UniqueFeatureSet> {
    let rows: Vec<UnionInput> = read_jsonl(path)?;
    let mut kept = Vec::new();
    for r in rows {
        let m = r.method.as_deref().map(str::parse::<Method>).transpose()?;
        if method.is_some_and(|want| m != Some(want)) || k.is_some_and(|want| r.k != Some(want)) {
            continue;
        }
        kept.push(r.row);
    }
    // the same feature may appear under several (method, K)
    let mut merged = UniqueFeatureSet::default();
    for r in &kept {
        *merged.counts.entry(r.feature).or_insert(0) += r.count;
    }
    Ok(merged)
}

pub fn interpret(s: &Session, union_path: Option<&Path>, method: Option<Method>, k: Option<usize>) -> anyhow::Result<()> {
    let path = union_path.map(Path::to_path_buf).unwrap_or_else(|| s.path(UNION));
    let features = read_union(&path, method, k)?;
    let spec = &s.cfg.interpret;
    let vocab = s.model.config().vocab_size;
    let corpus = random_corpus(vocab, spec.corpus_size, spec.corpus_len, spec.corpus_seed);
    let explainer: Box<dyn ExplainerClient> = match &spec.explainer_url {
        Some(url) => Box::new(HttpExplainer::new(url.clone(), spec.http)?),
        None => Box::new(StubExplainer {
            fail_on: spec.stub_fail.iter().copied().collect::<BTreeSet<_>>(),
        }),
    };
    let auditor: Box<dyn AuditorClient> = match &spec.auditor_url {
        Some(url) => Box::new(HttpAuditor::new(url.clone(), spec.http)?),
        None => {
            let mut a = StubAuditor::new(vocab, spec.corpus_len, s.cfg.seed);
            a.fail_on = spec.stub_fail.iter().copied().collect();
            Box::new(a)
        }
    };
    let report = run_interpretation(&s.model, &features, &corpus, explainer.as_ref(), auditor.as_ref(), &spec.params)?;
    write_jsonl(&s.path(INTERPRETATION), "interpret", &s.hash, &report.records)?;

    let mut table = Table::new(
        "interpret",
        &s.hash,
        &[format!("explainer_calls={} auditor_calls={}", report.explainer_calls, report.auditor_calls)],
        &["l", "f", "clarity", "purity", "responsiveness", "n_eval", "failures", "description"],
    )?;
    for r in &report.records {
        table.row([
            r.feature.layer.to_string(),
            r.feature.index.to_string(),
            opt(r.clarity),
            opt(r.purity),
            opt(r.responsiveness),
            r.n_eval.to_string(),
            r.failures.len().to_string(),
            r.description.clone().unwrap_or_default(),
        ])?;
    }
    table.save(&s.path(INTERPRETATION_CSV))?;

    let cost = estimate_cost(
        &CostCounts {
            unique_kept: report.features() as u64,
            ..CostCounts::default()
        },
        spec.c_feat,
    )?;
    eprintln!(
        "interpreted {} features ({} failed), {} client calls, estimated cost {}",
        report.features(),
        report.failed(),
        report.client_calls(),
        cost.unique_kept.total
    );
    Ok(())
}

pub fn sweep(s: &Session) -> anyhow::Result<()> {
    let spec = &s.cfg.sweep;
    let k = spec.k.unwrap_or(s.cfg.budgets[0]);
    if k == 0 {
        Err(ConfigError::new("sweep.k", "must be >= 1"))?;
    }
    let grid = run_synergy_grid(
        &s.model,
        &s.dataset,
        k,
        &spec.lambdas,
        &spec.boundary_percents,
        &s.cfg.sweep_config()?,
    )
    .map_err(|e| ConfigError::new("sweep", e))?;
    let best = grid.best();
    let notes = vec![
        format!("k={} baseline_mean_kl={} baseline_std_kl={}", grid.k, num(grid.baseline_mean_kl), num(grid.baseline_std_kl)),
        format!("argmin lambda={} bp={}", best.lambda, best.boundary_percent),
    ];
    let mut table = Table::new(
        "sweep",
        &s.hash,
        &notes,
        &["lambda", "bp", "mean_kl", "std_kl", "delta_mean_mkl", "delta_std_mkl", "argmin"],
    )?;
    for (i, c) in grid.cells.iter().enumerate() {
        table.row([
            c.lambda.to_string(),
            c.boundary_percent.to_string(),
            num(c.mean_kl),
            num(c.std_kl),
            num(c.delta_mean_mkl),
            num(c.delta_std_mkl),
            (i == grid.argmin).to_string(),
        ])?;
    }
    table.save(&s.path(SWEEP_CSV))?;
    eprintln!("sweep argmin: lambda={} bp={} ({} cells)", best.lambda, best.boundary_percent, grid.cells.len());
    Ok(())
}

/// Prints the cost table of the cost model.
pub fn cost(counts: &CostCounts, c_feat: f64) -> anyhow::Result<String> {
    let e = estimate_cost(counts, c_feat)?;
    let mut out = format!("price per feature: ${c_feat}\n");
    out.push_str(&format!("unique kept features: {} -> {}\n", e.unique_kept.count, e.unique_kept.total));
    if let Some(l) = e.active_per_prompt {
        out.push_str(&format!("active features per prompt: {} -> {}\n", l.count, l.total));
    }
    if let Some(l) = e.per_prompt_budget {
        out.push_str(&format!("per-prompt budget: {} -> {}\n", l.count, l.total));
    }
    if let Some(r) = e.per_prompt_ratio {
        out.push_str(&format!("per-prompt reduction: {}\n", report_ratio(r)));
    }
    if let Some(l) = e.dictionary {
        out.push_str(&format!("full dictionary: {} -> {}\n", l.count, l.total));
    }
    if let Some(r) = e.global_ratio {
        out.push_str(&format!("global reduction: {}\n", report_ratio(r)));
    }
    if let Some(m) = e.global_savings {
        out.push_str(&format!("global savings: {m}\n"));
    }
    Ok(out)
}
