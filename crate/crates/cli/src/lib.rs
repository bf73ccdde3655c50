//! Command-line front end: dataset synthesis, training, AVP evaluation,
//! loss ablation and gradient checks.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod features;
pub mod records;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use viewpoint_core::gradcheck::GradCheckOptions;
use viewpoint_core::losses::DistanceMode;
use viewpoint_core::toytrain::BinSelection;
use viewpoint_core::viewgeom::BinConvention;

use crate::commands::{EvalOptions, Outcome, TrainOptions};
use crate::config::{Overrides, RunConfig};

/// Environment variable holding the log filter, e.g. `info` or `debug`.
pub const LOG_ENV: &str = "VIEWPOINT_LOG";

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BinsArg {
    Centered,
    Edge,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DistanceArg {
    Circular,
    Literal,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SelectionArg {
    Integral,
    Max,
}

#[derive(Debug, Parser)]
#[command(name = "viewpoint", version, about = "Viewpoint estimation toolkit")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    bins: Option<BinsArg>,
    #[arg(long, global = true, value_enum)]
    distance: Option<DistanceArg>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic train/test annotations and feature blobs.
    Synth,
    /// Train one model per class and write logs, checkpoints and test predictions.
    Train {
        /// Continue from existing checkpoints.
        #[arg(long)]
        resume: bool,
        /// Halt after this many iterations per class.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Score predictions against ground truth per class.
    Eval {
        #[arg(long, required_unless_present = "summarize")]
        predictions: Option<PathBuf>,
        #[arg(long, required_unless_present = "summarize")]
        ground_truth: Option<PathBuf>,
        /// Recompute the mean of an existing `class,avp` table instead.
        #[arg(long, conflicts_with_all = ["predictions", "ground_truth"])]
        summarize: Option<PathBuf>,
        #[arg(long, value_enum)]
        selection: Option<SelectionArg>,
        #[arg(long)]
        iou_threshold: Option<f64>,
        /// Also write VPR curves as SVG.
        #[arg(long)]
        svg: bool,
    },
    /// Train and score every configured loss on the toy benchmark.
    Ablate,
    /// Compare analytic loss gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Perturb the analytic gradients; the check must then fail.
        #[arg(long)]
        corrupt: bool,
    },
}

fn overrides(cli: &Cli) -> Overrides {
    Overrides {
        seed: cli.seed,
        bins: cli.bins.map(|b| match b {
            BinsArg::Centered => BinConvention::Centered,
            BinsArg::Edge => BinConvention::Edge,
        }),
        distance: cli.distance.map(|d| match d {
            DistanceArg::Circular => DistanceMode::Circular,
            DistanceArg::Literal => DistanceMode::Literal,
        }),
        out: cli.out.clone(),
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<Outcome> {
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides(&cli))?;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Train { resume, stop_after } => commands::train(&cfg, TrainOptions { resume, stop_after }),
        Command::Eval {
            predictions,
            ground_truth,
            summarize,
            selection,
            iou_threshold,
            svg,
        } => {
            if let Some(table) = summarize {
                return commands::summarize(&table, &cfg.out);
            }
            let selection = match selection {
                Some(SelectionArg::Integral) => BinSelection::Integral,
                Some(SelectionArg::Max) => BinSelection::MaxActivation,
                None => cfg.eval.selection,
            };
            commands::eval(&EvalOptions {
                predictions: predictions.expect("required by clap"),
                ground_truth: ground_truth.expect("required by clap"),
                bins: cfg.bin_scheme()?,
                iou_threshold: iou_threshold.unwrap_or(cfg.eval.iou_threshold),
                selection,
                svg,
                out: cfg.out.clone(),
            })
        }
        Command::Ablate => commands::ablate(&cfg),
        Command::Gradcheck { trials, corrupt } => {
            if trials == 0 {
                anyhow::bail!("--trials must be at least 1");
            }
            commands::gradcheck(&GradCheckOptions {
                trials,
                seed: cfg.seed,
                corrupt,
                ..Default::default()
            })
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    match dispatch(cli) {
        Ok(Outcome::Success) => EXIT_OK,
        Ok(Outcome::CheckFailed) => EXIT_CHECK_FAILED,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}
