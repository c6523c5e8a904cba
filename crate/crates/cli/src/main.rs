// SPDX-License-Identifier: MIT OR Apache-2.0

//! `pie`: prune, interpret and evaluate circuits of a replacement model.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Session;
use config::{ConfigError, Overrides, PipelineConfig};
use pie_core::fidelity::CostCounts;
use pie_core::{Method, PieError};

/// Exit status of configuration and argument errors.
const EXIT_CONFIG: u8 = 2;
/// Exit status of I/O, model and client-transport errors.
const EXIT_RUNTIME: u8 = 1;

#[derive(Parser)]
#[command(name = "pie", version, about = "Prune-first circuit discovery and interpretation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML pipeline config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scoring method(s): fap, fap-synergy, act-mag, factp, relp, random-active.
    #[arg(long = "method", value_delimiter = ',')]
    methods: Vec<String>,
    /// Occurrence budget(s) K, ascending.
    #[arg(long = "k", value_delimiter = ',')]
    budgets: Vec<usize>,
    /// Synergy weight; a list sets the sweep grid.
    #[arg(long = "lambda", value_delimiter = ',')]
    lambdas: Vec<f64>,
    /// Boundary percent; a list sets the sweep grid.
    #[arg(long = "bp", value_delimiter = ',')]
    percents: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// logit_difference or negative_kl.
    #[arg(long)]
    metric: Option<String>,
    /// clean or corrupted.
    #[arg(long = "gradient-run")]
    gradient_run: Option<String>,
}

impl Common {
    fn config(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        cfg.apply(&Overrides {
            methods: self.methods.clone(),
            budgets: self.budgets.clone(),
            lambdas: self.lambdas.clone(),
            percents: self.percents.clone(),
            seed: self.seed,
            out: self.out.clone(),
            metric: self.metric.clone(),
            gradient_run: self.gradient_run.clone(),
        });
        Ok(cfg)
    }

    fn session(&self) -> anyhow::Result<Session> {
        Session::open(self.config()?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Score occurrences and write per-prompt circuits, scores, audit and union.
    Prune(Common),
    /// Behavioural fidelity of a circuits file, plus the compression curve.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Circuits file; `<out>/circuits.jsonl` by default.
        #[arg(long)]
        circuits: Option<PathBuf>,
    },
    /// Describe and score the features of a union file.
    Interpret {
        #[command(flatten)]
        common: Common,
        /// Union file; `<out>/union.jsonl` by default.
        #[arg(long)]
        union: Option<PathBuf>,
        /// Only the union rows of this method.
        #[arg(long = "for-method")]
        for_method: Option<String>,
        /// Only the union rows of this budget.
        #[arg(long = "for-k")]
        for_k: Option<usize>,
    },
    /// Lambda x bp grid of FAP-Synergy against plain FAP.
    Sweep(Common),
    /// Prune, interpret (when enabled) and evaluate in one go.
    Run(Common),
    /// Interpretation cost of a feature count.
    Cost(CostArgs),
}

#[derive(Args)]
struct CostArgs {
    /// Union file whose distinct features are counted.
    #[arg(long, conflicts_with = "unique")]
    union: Option<PathBuf>,
    /// Number of unique kept features.
    #[arg(long)]
    unique: Option<u64>,
    /// Features active on one prompt.
    #[arg(long)]
    active: Option<u64>,
    /// Per-prompt budget K.
    #[arg(long)]
    budget: Option<u64>,
    /// Full dictionary size.
    #[arg(long)]
    dictionary: Option<u64>,
    /// Dollars per interpreted feature.
    #[arg(long = "c-feat", default_value_t = 0.0235)]
    c_feat: f64,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prune(c) => commands::prune(&c.session()?),
        Command::Evaluate { common, circuits } => commands::evaluate(&common.session()?, circuits.as_deref()),
        Command::Interpret {
            common,
            union,
            for_method,
            for_k,
        } => {
            let method = for_method
                .map(|m| m.parse::<Method>().map_err(|e| ConfigError::new("--for-method", e)))
                .transpose()?;
            commands::interpret(&common.session()?, union.as_deref(), method, for_k)
        }
        Command::Sweep(c) => commands::sweep(&c.session()?),
        Command::Run(c) => {
            let s = c.session()?;
            commands::prune(&s)?;
            if s.cfg.interpret.enabled {
                commands::interpret(&s, None, None, None)?;
            }
            commands::evaluate(&s, None)
        }
        Command::Cost(a) => {
            let unique = match (&a.union, a.unique) {
                (Some(p), _) => commands::read_union(p, None, None)?.len() as u64,
                (None, Some(n)) => n,
                (None, None) => Err(ConfigError::new("cost", "pass --union or --unique"))?,
            };
            let counts = CostCounts {
                unique_kept: unique,
                active_per_prompt: a.active,
                per_prompt_budget: a.budget,
                dictionary: a.dictionary,
            };
            print!("{}", commands::cost(&counts, a.c_feat)?);
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<PieError>() {
            return match e {
                PieError::Config(_) | PieError::Argument(_) | PieError::Parse { .. } | PieError::Partition(_) => {
                    EXIT_CONFIG
                }
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
