//! `caac`: data generation, training, evaluation, comparison and plots.
//!
//! Exit status is 0 on success, 2 for configuration or usage errors and 1
//! for I/O and runtime failures. Diagnostics go to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "caac",
    version,
    about = "Synthetic cloud optical thickness retrieval pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMethod {
    Caac,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMethod {
    Ipa,
    Mlp,
    Caac,
    Oracle,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/val/test datasets and their manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write its best checkpoint and loss history.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "caac")]
        method: TrainMethod,
        /// Continue from a checkpoint; epochs are numbered after its history.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a retriever on the test split over an angle grid.
    Eval(EvalArgs),
    /// Tabulate metrics files side by side with RMSE ratios.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit raster maps of one test scene, or an error-vs-angle table.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct RetrieverArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Retriever kind; `mlp` and `caac` need `--checkpoint`.
    #[arg(long, value_enum)]
    pub method: Option<EvalMethod>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub retriever: RetrieverArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "sza=0:60:15,vza=0:45:15")]
    pub angles: String,
    /// Metrics CSV; per-geometry rows go to `<stem>.geometry.csv` beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Method name written into the metrics file.
    #[arg(long)]
    pub label: Option<String>,
    /// Render the test scenes without 3D effects.
    #[arg(long)]
    pub no_3d: bool,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Test scene index to map.
    #[arg(long, conflicts_with = "metrics", requires = "data")]
    pub scene: Option<usize>,
    /// Metrics or per-geometry CSV written by eval.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub retriever: RetrieverArgs,
    /// Single geometry for scene maps.
    #[arg(long, default_value = "sza=30,vza=15")]
    pub angles: String,
    #[arg(long)]
    pub no_3d: bool,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn configure_threads() -> caac_core::Result<()> {
    let Ok(value) = std::env::var("CAAC_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            caac_core::Error::config(format!(
                "CAAC_THREADS must be a positive integer, got {value:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| caac_core::Error::config(format!("cannot size the worker pool: {e}")))
}

fn run(cli: Cli) -> caac_core::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData { config, out } => commands::gen_data(config.as_deref(), &out),
        Command::Train {
            config,
            data,
            out,
            method,
            resume,
        } => commands::train(config.as_deref(), &data, &out, method, resume.as_deref()),
        Command::Eval(args) => commands::eval(&args),
        Command::Compare { metrics, out } => commands::compare(&metrics, out.as_deref()),
        Command::Plot(args) => commands::plot(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
