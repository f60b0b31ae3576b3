mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dpn::data::Split;
use dpn::verify::{Suite, VerifyOptions};

use commands::{EvalArgs, IngestArgs, TrainArgs, VerifyArgs};

/// Train, evaluate and verify dynamic parameterized CTR models.
#[derive(Parser)]
#[command(name = "dpn", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a run config.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: `out_dir` from the config, else runs/train).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluation worker threads.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        checkpoint: PathBuf,
        /// Run config describing the data (default: config.resolved.toml next to the checkpoint).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// `field:threshold`: test rows whose field value occurs fewer than threshold times in train.
        #[arg(long = "slice")]
        slices: Vec<String>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Report path (default: eval_<split>.json next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the identity, gradient-check and oracle suites.
    Verify {
        #[arg(long, default_value = "all", value_parser = parse_suite)]
        suite: Suite,
        /// Perturb fused layer outputs so the identities must fail.
        #[arg(long)]
        inject_fault: bool,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value = "runs/verify")]
        out: PathBuf,
    },
    /// Parameter counts and training seconds per epoch for a list of models.
    Bench {
        config: PathBuf,
        #[arg(long, default_value = "runs/bench")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Read a dataset and write its schema, split manifest and summary.
    Ingest {
        input: PathBuf,
        /// csv, libfm, criteo, avazu or movielens (input is then a directory).
        #[arg(long, default_value = "csv")]
        format: String,
        /// Field names for libfm input.
        #[arg(long, value_delimiter = ',')]
        fields: Vec<String>,
        /// Hash buckets per field for criteo and avazu.
        #[arg(long, default_value_t = 1_000_000)]
        buckets: usize,
        /// `user_field:target_field[:ratio]` negative sampling for positive-only CSV.
        #[arg(long)]
        negatives: Option<String>,
        #[arg(long, default_value = "7:2:1")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/ingest")]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split `{s}` (expected train, val or test)"))
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: dpn::DpnError| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { config, seed, out, threads } => commands::train(&TrainArgs { config, seed, out, threads }).map(|_| true),
        Cmd::Eval { checkpoint, config, split, slices, threads, out } => {
            commands::eval(&EvalArgs { checkpoint, config, split, slices, threads, out }).map(|_| true)
        }
        Cmd::Verify { suite, inject_fault, instances, seeds, out } => {
            commands::verify(&VerifyArgs { suite, opts: VerifyOptions { instances, seeds, inject_fault }, out })
        }
        Cmd::Bench { config, out, threads } => commands::bench(&config, &out, threads).map(|_| true),
        Cmd::Ingest { input, format, fields, buckets, negatives, split, seed, out } => {
            commands::ingest(&IngestArgs { input, format, fields, buckets, negatives, split, seed, out }).map(|_| true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
