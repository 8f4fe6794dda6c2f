//! `itl`: generate datasets, run continual-learning experiments, aggregate
//! results.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
//! failure, 4 invariant violation.

mod config;
mod report;
mod runner;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use itl::Error;

/// Default output root when neither flags nor config give one.
pub const OUT_ROOT_ENV: &str = "ITL_OUT_ROOT";

#[derive(Parser)]
#[command(name = "itl", version, about = "Continual learning on the tangent plane")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset to disk.
    Gen(GenArgs),
    /// Run the experiment described by a config file.
    Run(RunArgs),
    /// Aggregate metrics files into comparison tables and series.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Config file supplying the data section; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Storage element type: f32 or f64.
    #[arg(long, default_value = "f32")]
    precision: String,
    /// Output directory (default: <output root>/dataset).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's seed list (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Replace the config's variant list (repeatable).
    #[arg(long = "variant")]
    variants: Vec<String>,
    /// Override the buffer capacity.
    #[arg(long)]
    buffer_capacity: Option<usize>,
    /// Override the output directory root.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// metrics.json files, or directories searched recursively for them.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    /// Directory for the aggregated series files; stdout gets the tables.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape { .. } => 1,
        Error::Data(_) | Error::Io(_) => 2,
        Error::NonFinite(_) => 3,
        Error::Invariant(_) => 4,
    }
}

/// Output root resolution: flag, then config, then environment, then cwd.
fn out_root(flag: Option<PathBuf>, from_config: Option<PathBuf>) -> PathBuf {
    flag.or(from_config)
        .or_else(|| std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("itl-runs"))
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Gen(args) => runner::gen(args),
        Cmd::Run(args) => runner::run(args),
        Cmd::Report(args) => report::report(args),
    };
    if let Err(e) = result {
        eprintln!("itl: {}", e);
        std::process::exit(exit_code(&e));
    }
}

/// Applies run-command flags on top of the parsed file.
fn apply_overrides(cfg: &mut ExperimentConfig, args: &RunArgs) {
    if !args.seeds.is_empty() {
        cfg.run.seeds = args.seeds.clone();
    }
    if !args.variants.is_empty() {
        cfg.run.variants = args.variants.clone();
    }
    if let Some(cap) = args.buffer_capacity {
        cfg.buffer.capacity = cap;
    }
    if let Some(dir) = &args.out_dir {
        cfg.run.out_dir = Some(dir.clone());
    }
}
