//! `mogaf` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mogaf::Error;

#[derive(Parser, Debug)]
#[command(name = "mogaf", version, about = "Motion-group-aware Gaussian trajectory forecasting")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand. They form the top configuration layer.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON configuration file (lowest-priority layer above defaults).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; 1 gives the reference single-threaded mode.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Scene preset: two-groups, rigid-nonrigid-mix or occlusion-stress.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Training epochs per forecaster.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Encoder layers of the forecaster.
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    /// Arbitrary override, e.g. `--set optim.steps=50` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene with masks and ground truth.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Keep only the first N groups of the preset.
        #[arg(long)]
        groups: Option<usize>,
    },
    /// Group gaussians into motion groups.
    Group {
        #[arg(long)]
        scene: PathBuf,
        /// Mask index JSON written by `generate`.
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = GroupMethod::Scene)]
        method: GroupMethod,
    },
    /// Refine a scene with group-wise rigid / non-rigid losses.
    Refine {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        /// Observed trajectory CSV the scene is fitted to.
        #[arg(long)]
        observed: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one forecaster per motion group on a scene's trajectories.
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll trained forecasters forward.
    Forecast {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted trajectories against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Scene JSON whose cameras cover the evaluated frames.
        #[arg(long)]
        scene: PathBuf,
        /// Ground-truth JSON with occlusion flags and labels (enables AJ and OA).
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write per-horizon error curves as CSV.
        #[arg(long)]
        emit_plot_data: bool,
    },
    /// Export a scene as PLY point clouds or trajectory CSV.
    Export {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum)]
        format: ExportFormat,
        /// Bank JSON used to color PLY points and write labels.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Single timestep to export (PLY); all frames otherwise.
        #[arg(long)]
        t: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full run: generate, group, refine, train, forecast, evaluate.
    Pipeline {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ablation arm.
        #[arg(long, value_parser = ["none", "no-grouping", "no-masking", "naive4d", "global-forecaster"])]
        ablate: Option<String>,
        /// Print the resolved plan and write nothing.
        #[arg(long)]
        dry_run: bool,
        /// Write per-horizon error curves as CSV.
        #[arg(long)]
        emit_plot_data: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GroupMethod {
    Scene,
    Naive4d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Ply,
    Csv,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        e if e.is_numerical() => 3,
        Error::Io { .. } | Error::Parse { .. } | Error::Json(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
