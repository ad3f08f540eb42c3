//! `popest`: synthetic lab, stay-point ingestion, estimation, training,
//! evaluation and the acceptance run.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 data error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use popest::estimators::Method;
use popest::learner::Variant;
use popest::pipeline::PipelineConfig;
use popest::Attribute;

use commands::{CmdResult, Failure, EXIT_CHECK};
use manifest::Layout;

#[derive(Parser)]
#[command(name = "popest", version, about = "Population statistics from biased mobility samples")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct Common {
    /// JSON config file; every field is optional and flags take precedence
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Global seed [default: 42]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: out]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Number of biased resamples [default: 5]
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Stay-point distance threshold in meters [default: 200]
    #[arg(long = "spd-dist-m", global = true, value_name = "M")]
    spd_dist_m: Option<f64>,
    /// Stay-point time threshold in seconds [default: 1800]
    #[arg(long = "spd-time-s", global = true, value_name = "S")]
    spd_time_s: Option<i64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a city, its full population and k biased samples
    Synth,
    /// Turn raw ping CSVs into a stay-point dataset
    Ingest {
        /// Ping CSV files [default: inputs.pings from the config]
        pings: Vec<PathBuf>,
    },
    /// Initial per-cell estimates for every sample
    Estimate {
        /// oblivious or debiased [default: every method in the config]
        #[arg(long)]
        method: Option<Method>,
    },
    /// Train learned estimators on the initial estimates
    Train {
        /// O, D, OW or DW [default: every variant in the config]
        #[arg(long)]
        variant: Option<Variant>,
        /// visits, duration or distance [default: all three]
        #[arg(long)]
        attribute: Option<Attribute>,
    },
    /// Score every estimate against the ground truth
    Evaluate,
    /// Run every stage, then the acceptance checks
    Repro {
        /// Criterion ids to check, comma separated [default: all]
        #[arg(long, value_delimiter = ',')]
        criterion: Vec<u8>,
    },
}

fn load_config(common: &Common) -> CmdResult<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) if !path.exists() => return Err(Failure::config(format!("config file {} not found", path.display()))),
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(k) = common.k {
        cfg.k = k;
    }
    if let Some(d) = common.spd_dist_m {
        cfg.spd.dist_thresh_m = d;
    }
    if let Some(t) = common.spd_time_s {
        cfg.spd.time_thresh_s = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CmdResult<()> {
    let cfg = load_config(&cli.common)?;
    let layout = Layout::new(cfg.out_dir.clone());
    match cli.command {
        Command::Synth => commands::synth(&cfg, &layout),
        Command::Ingest { pings } => commands::ingest(&cfg, &layout, &pings),
        Command::Estimate { method } => commands::estimate(&cfg, &layout, method),
        Command::Train { variant, attribute } => commands::train(&cfg, &layout, variant, attribute),
        Command::Evaluate => commands::evaluate_cmd(&cfg, &layout),
        Command::Repro { criterion } => match commands::repro(&cfg, &layout, &criterion)? {
            true => Ok(()),
            false => Err(Failure { code: EXIT_CHECK, error: anyhow::anyhow!("acceptance checks failed") }),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
