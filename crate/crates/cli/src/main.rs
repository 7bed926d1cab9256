//! `atlas`: search a text-to-image model for failure slices.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Backend;

#[derive(Parser, Debug)]
#[command(name = "atlas", version, about = "Find, report and explain failure slices of text-to-image models")]
struct Cli {
    /// JSON run config; flags override its values, which override defaults
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// More log output (repeat for debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate and inspect corpus files
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Run a layered search and journal every evaluation
    Search(SearchArgs),
    /// Continue an interrupted or budget-limited search
    Resume(ResumeArgs),
    /// Flag error slices whose caption frequency is below alpha times the layer average
    Attribute(AttributeArgs),
    /// Write per-layer stats, discovery curves and slice exports from a journal
    Report(ReportArgs),
    /// Compare canonical, random and prioritized ordering on a planted landscape
    Bench(BenchArgs),
    /// Inspect the success predictor
    #[command(subcommand)]
    Predictor(PredictorCommand),
}

#[derive(Subcommand, Debug)]
enum CorpusCommand {
    /// Check schema, ids, subcategories and validity lists
    Validate { path: PathBuf },
    /// Print term counts per category and subcategory as JSON
    Stats { path: PathBuf },
    /// Measure how much of an extracted term list the corpus covers
    Coverage {
        path: PathBuf,
        /// TSV file: term, kind, frequency
        #[arg(long, value_name = "TSV")]
        terms: PathBuf,
        /// Count each distinct term once instead of weighting by frequency
        #[arg(long)]
        distinct: bool,
    },
}

/// Search parameters shared by `search` and `bench`. Unset flags fall back
/// to the config file, then to the listed defaults.
#[derive(Args, Debug, Clone, Default)]
struct SearchFlags {
    /// Success threshold τ: a node fails when its success rate is below it [default: 0.8]
    #[arg(long)]
    tau: Option<f64>,
    /// Images generated per node [default: 25]
    #[arg(long)]
    images_per_node: Option<u32>,
    /// Deepest layer (entity plus max_depth - 1 attributes) [default: 3]
    #[arg(long)]
    max_depth: Option<usize>,
    /// Run seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Journaled evaluations between predictor retrains [default: 10000]
    #[arg(long)]
    retrain_interval: Option<usize>,
    /// Extra oracle attempts before a node is journaled as unresolved [default: 2]
    #[arg(long)]
    retries: Option<u32>,
    /// Parallel node evaluations [default: 4]
    #[arg(long)]
    workers: Option<usize>,
    /// Predictor learning rate [default: 0.2]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Predictor epochs per retrain [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    /// Corpus JSON file
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Oracle backend [default: sim]
    #[arg(long, value_enum)]
    oracle: Option<Backend>,
    /// Planted landscape JSON for the sim backend [default: generated from --seed]
    #[arg(long)]
    landscape: Option<PathBuf>,
    /// Base URL of the HTTP oracle (token from ATLAS_ORACLE_TOKEN)
    #[arg(long)]
    oracle_url: Option<String>,
    /// Base URL of an optional grammar-correction service
    #[arg(long)]
    grammar_url: Option<String>,
    /// Term embeddings JSONL ({"term": id, "vector": [...]}) [default: hashed, 64 dims]
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Stop after this many journaled evaluations [default: unlimited]
    #[arg(long)]
    budget: Option<u64>,
    /// Evaluate each layer in canonical order without the predictor
    #[arg(long, conflicts_with = "random_order")]
    no_prioritizer: bool,
    /// Evaluate each layer in seeded random order
    #[arg(long)]
    random_order: bool,
    /// Output directory for the journal and run config [default: .]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: SearchFlags,
}

#[derive(Args, Debug)]
struct ResumeArgs {
    /// Journal written by `atlas search`; its run_config.json must sit beside it
    #[arg(long)]
    journal: PathBuf,
    /// New evaluation cap [default: the original budget]
    #[arg(long)]
    budget: Option<u64>,
    /// Parallel node evaluations [default: the original value]
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct AttributeArgs {
    #[arg(long)]
    journal: PathBuf,
    /// Captions file, one caption per line
    #[arg(long)]
    captions: PathBuf,
    /// Scarcity multiplier on the layer-average frequency
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Also sweep alpha over 0.1, 0.2, ..., 1.2
    #[arg(long)]
    alpha_grid: bool,
    /// Restrict to one layer
    #[arg(long)]
    layer: Option<usize>,
    /// Corpus file [default: from the journal's run_config.json]
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory [default: .]
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    journal: PathBuf,
    /// Corpus file [default: from the journal's run_config.json]
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory [default: .]
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Planted landscape JSON; each seed reuses it with its own noise seed
    #[arg(long)]
    landscape: PathBuf,
    /// Number of seeds (0..N)
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Layer whose failures are counted [default: max depth]
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    flags: SearchFlags,
}

#[derive(Subcommand, Debug)]
enum PredictorCommand {
    /// Replay a journal, retraining every K records, and write the held-out L1 curve as CSV
    Eval {
        #[arg(long)]
        journal: PathBuf,
        /// Records between retrains
        #[arg(long, value_name = "K")]
        split_at: usize,
        /// Corpus file [default: from the journal's run_config.json]
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// CSV output file [default: stdout]
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Marks an error as bad input (exit 1) rather than a runtime failure (exit 2).
#[derive(Debug)]
struct Invalid(anyhow::Error);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Invalid {}

pub(crate) fn invalid(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(Invalid(e.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<Invalid>()) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
