//! `browning`: synthetic corpora, training, scoring and aggregation of
//! greenness anomalies.

mod commands;
mod config;
mod exit;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Parser, Subcommand};
use forest_browning::anomaly::MergeRule;

use commands::{AggregateArgs, FitArgs, FitKind, MetricsArgs, Run};
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "browning", version, about = "Quantile greenness models and browning anomalies", after_help = exit::EXIT_TABLE)]
struct Cli {
    /// Key-value configuration file (`section.field = value` per line).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration value; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for `synth` (synth.seed) and `fit` (train.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More progress output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with known quantile curves.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter observations and encode pixel covariates.
    Prep {
        #[arg(long)]
        pixels: PathBuf,
        #[arg(long)]
        observations: PathBuf,
        /// Apply this preprocessor instead of fitting one.
        #[arg(long)]
        preprocessor: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional model or fit a baseline.
    Fit {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        ndvi: PathBuf,
        #[arg(long, value_enum, default_value = "conditional")]
        kind: FitKind,
        /// Preprocessor written by `prep`; required for a new conditional model.
        #[arg(long)]
        preprocessor: Option<PathBuf>,
        /// Continue training this checkpoint for train.epochs more epochs.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train on these pixel ids only.
        #[arg(long, value_name = "FILE")]
        pixel_set: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate quantile curves on an evenly spaced day grid.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 53)]
        grid_points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Anomaly score of every observation.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        ndvi: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Goodness of fit against a reference model.
    Metrics {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Climatology checkpoint for daily skill; defaults to the reference
        /// when it is a climatology.
        #[arg(long)]
        climatology: Option<PathBuf>,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        ndvi: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Daily and per-pixel anomaly fractions, and snapshot maps.
    Aggregate {
        #[arg(long)]
        records: PathBuf,
        /// Comma-separated dates for a snapshot map.
        #[arg(long)]
        dates: Option<String>,
        #[arg(long, value_enum, default_value = "any")]
        merge: Merge,
        /// Pixel table with row/col, for the ASCII snapshot grid.
        #[arg(long)]
        pixels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score percentiles and anomalous fraction per date for two areas.
    Case {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        affected: PathBuf,
        #[arg(long)]
        control: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Merge {
    Any,
    All,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Prep { .. } => "prep",
            Command::Fit { .. } => "fit",
            Command::Predict { .. } => "predict",
            Command::Score { .. } => "score",
            Command::Metrics { .. } => "metrics",
            Command::Aggregate { .. } => "aggregate",
            Command::Case { .. } => "case",
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        config.synth.seed = seed;
        config.train.seed = seed;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(exit::CliError::Config("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut r = Run {
        config,
        command: cli.command.name(),
        threads: rayon::current_num_threads(),
        verbosity: if cli.quiet { -1 } else { cli.verbose as i8 },
        started: Instant::now(),
        inputs: BTreeMap::new(),
        outputs: Vec::new(),
    };
    match &cli.command {
        Command::Synth { out } => commands::synth(&mut r, out),
        Command::Prep { pixels, observations, preprocessor, out } => {
            commands::prep(&mut r, pixels, observations, preprocessor.as_deref(), out)
        }
        Command::Fit { features, ndvi, kind, preprocessor, resume, pixel_set, out } => commands::fit(
            &mut r,
            FitArgs {
                features,
                ndvi,
                kind: *kind,
                preprocessor: preprocessor.as_deref(),
                resume: resume.as_deref(),
                pixel_set: pixel_set.as_deref(),
                out,
            },
        ),
        Command::Predict { checkpoint, features, grid_points, out } => {
            commands::predict(&mut r, checkpoint, features, *grid_points, out)
        }
        Command::Score { checkpoint, features, ndvi, out } => commands::score(&mut r, checkpoint, features, ndvi, out),
        Command::Metrics { checkpoint, reference, climatology, features, ndvi, out } => commands::metrics(
            &mut r,
            MetricsArgs { checkpoint, reference, climatology: climatology.as_deref(), features, ndvi, out },
        ),
        Command::Aggregate { records, dates, merge, pixels, out } => commands::aggregate(
            &mut r,
            AggregateArgs {
                records,
                dates: dates.as_deref(),
                merge: match merge {
                    Merge::Any => MergeRule::Any,
                    Merge::All => MergeRule::All,
                },
                pixels: pixels.as_deref(),
                out,
            },
        ),
        Command::Case { records, affected, control, out } => commands::case(&mut r, records, affected, control, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit::report(&e),
    }
}
