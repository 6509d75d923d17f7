mod commands;
mod config;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use workspace::Fail;

/// Aspect-aware graph recommender pipeline.
#[derive(Debug, Parser)]
#[command(name = "sagcn", version)]
pub struct Cli {
    /// Directory holding all stage artifacts.
    #[arg(long, global = true, default_value = "workspace")]
    pub workspace: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// TOML file with [split], [model] and [train] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Rerun a stage even when the manifest says it is up to date.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
    /// Directory of `*.jsonl` canned responses for the mock backend.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Fail on prompts missing from the fixtures instead of answering them
    /// with the built-in keyword responder.
    #[arg(long)]
    pub strict: bool,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    /// Reuse responses already stored in the workspace cache.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, default_value = "http://localhost:8000/v1/chat/completions")]
    pub endpoint: String,
    #[arg(long, default_value = "vicuna-13b-v1.5")]
    pub model: String,
    #[arg(long, default_value_t = 60)]
    pub timeout_secs: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a corpus, split it and run aspect discovery on every review.
    Extract {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "amazon-json-lines")]
        format: String,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Merge discovered aspect names and keep the most frequent ones.
    Consolidate {
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// TOML with a `[merge]` table (raw = "canonical") and a `drop` list.
        #[arg(long)]
        merge: Option<PathBuf>,
    },
    /// Ask which vocabulary aspects every review touches.
    Annotate {
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Build the normalized per-aspect graphs from training interactions.
    BuildGraphs,
    /// Train the model with early stopping on validation recall.
    Train,
    /// Evaluate the trained model on the test split.
    Eval {
        #[arg(long = "k", default_values_t = vec![10, 20])]
        ks: Vec<usize>,
        /// Also report metrics for each aspect block alone.
        #[arg(long)]
        per_aspect: bool,
        /// Also write the cross-aspect cosine matrix for one user.
        #[arg(long)]
        independence: bool,
        /// User for `--independence`; defaults to the first user.
        #[arg(long)]
        independence_user: Option<String>,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
    },
    /// Print per-aspect preference scores for one user and item.
    Explain {
        #[arg(long)]
        user: String,
        #[arg(long)]
        item: Vec<String>,
    },
    /// Retrain with the top-n aspects for each n and report test metrics.
    Sweep {
        #[arg(long = "n")]
        ns: Vec<usize>,
        #[arg(long = "k", default_values_t = vec![10, 20])]
        ks: Vec<usize>,
    },
    /// Rank one held-out positive among sampled negatives by asking the LLM.
    /// The mock backend answers with random ratings.
    LlmRank {
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 9)]
        negatives: usize,
        #[arg(long = "k", default_values_t = vec![1, 3, 5, 7])]
        ks: Vec<usize>,
        /// JSON object mapping item id to title.
        #[arg(long)]
        titles: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Write a planted-aspect corpus for testing.
    GenSynthetic {
        /// Output corpus path; defaults to `<workspace>/corpus.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 10)]
        groups: usize,
        #[arg(long, default_value_t = 16)]
        per_user: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, value_delimiter = ',', default_value = "durability,price")]
        aspects: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Test,
    Validation,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<Fail>().map_or(1, |f| f.code);
            eprintln!("error: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}
