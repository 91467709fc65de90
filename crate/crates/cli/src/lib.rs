//! Command-line front end: argument parsing, config resolution, manifests.

pub mod commands;
pub mod config;
pub mod error;
pub mod plots;
pub mod vocab;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use toml::Value;

use crate::config::{parse_assignment, RunConfig};
use crate::error::{CliError, Result};

/// Thread count override read from the environment.
pub const THREADS_ENV: &str = "EMT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "extmind", version, about = "Retrieval-augmented toy transformer runs and benchmarks")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Where artifacts and the manifest are written.
    #[arg(short, long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Weights file (`model.weights`).
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Vocabulary file (`model.vocab`).
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
    /// Any config key, e.g. `--set retrieval.k=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Train a toy model and write its weights and vocabulary.
    TrainToy,
    /// Cache a document as a memory bank.
    CacheBuild {
        #[arg(long)]
        document: Option<PathBuf>,
    },
    /// Decode from a prompt, optionally retrieving from a bank.
    Generate {
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Perplexity against input length.
    BenchPpl {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Question answering over long documents.
    BenchRetrieval {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Wall-clock cost of repeated queries over one document.
    BenchTiming {
        #[arg(long)]
        document: Option<PathBuf>,
    },
    /// Retrieval accuracy with memories on subsets of layers.
    AblateLayers {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainToy => "train-toy",
            Command::CacheBuild { .. } => "cache-build",
            Command::Generate { .. } => "generate",
            Command::BenchPpl { .. } => "bench-ppl",
            Command::BenchRetrieval { .. } => "bench-retrieval",
            Command::BenchTiming { .. } => "bench-timing",
            Command::AblateLayers { .. } => "ablate-layers",
        }
    }

    fn overrides(&self) -> Vec<(String, Value)> {
        let path =
            |k: &str, p: &Option<PathBuf>| p.as_ref().map(|p| (k.to_string(), Value::String(p.display().to_string())));
        let entries = match self {
            Command::TrainToy => vec![],
            Command::CacheBuild { document } => vec![path("cache.document", document)],
            Command::Generate { prompt, bank } => vec![
                prompt.as_ref().map(|p| ("generation.prompt".to_string(), Value::String(p.clone()))),
                path("generation.bank", bank),
            ],
            Command::BenchPpl { corpus } => vec![path("bench.ppl.corpus", corpus)],
            Command::BenchRetrieval { dataset } | Command::AblateLayers { dataset } => {
                vec![path("bench.retrieval.dataset", dataset)]
            }
            Command::BenchTiming { document } => vec![path("bench.timing.document", document)],
        };
        entries.into_iter().flatten().collect()
    }
}

/// Overrides in increasing precedence: `EMT_THREADS`, `--set`, dedicated flags.
fn overrides(cli: &Cli, env_threads: Option<String>) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    if let Some(t) = env_threads {
        let n: i64 = t.trim().parse().map_err(|_| CliError::Config(format!("{THREADS_ENV}={t:?} is not a count")))?;
        out.push(("threads".to_string(), Value::Integer(n)));
    }
    for s in &cli.sets {
        out.push(parse_assignment(s)?);
    }
    let path = |p: &PathBuf| Value::String(p.display().to_string());
    let flags = [
        cli.output_dir.as_ref().map(|p| ("output_dir", path(p))),
        cli.seed.map(|s| ("seed", Value::Integer(s as i64))),
        cli.threads.map(|t| ("threads", Value::Integer(t as i64))),
        cli.weights.as_ref().map(|p| ("model.weights", path(p))),
        cli.vocab.as_ref().map(|p| ("model.vocab", path(p))),
    ];
    out.extend(flags.into_iter().flatten().map(|(k, v)| (k.to_string(), v)));
    out.extend(cli.command.overrides());
    Ok(out)
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = overrides(&cli, std::env::var(THREADS_ENV).ok())
        .and_then(|o| RunConfig::load(cli.config.as_deref(), &o))
        .and_then(|cfg| commands::run(&cli.command, cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
