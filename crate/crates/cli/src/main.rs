use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod failure;

use failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "defnet", version, about = "Part-deformation object detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON benchmark configuration; absent fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Every artifact of the command is written under this directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Plain,
    Multistage,
    Scheme1,
    Scheme2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EnsembleMode {
    #[value(name = "all-cls")]
    AllCls,
    #[value(name = "per-cls")]
    PerCls,
}

#[derive(Debug, Clone, Args)]
pub struct Toggles {
    #[arg(long)]
    pub no_rejection: bool,
    #[arg(long)]
    pub no_subbox: bool,
    #[arg(long)]
    pub no_context: bool,
    #[arg(long)]
    pub no_refine: bool,
    #[arg(long)]
    pub no_nms: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/val scenes, manifests and proposals.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_images: Option<usize>,
        #[arg(long)]
        val_images: Option<usize>,
    },
    /// Train a detector network, plus its context network and fitted stages.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "plain")]
        schedule: ScheduleArg,
        /// Stage branches for the multistage schedule.
        #[arg(long)]
        stages: Option<usize>,
        /// Epochs of each plain phase (and of the multistage base phase).
        #[arg(long)]
        epochs: Option<usize>,
        /// Skip the context network and the fitted post-network stages.
        #[arg(long)]
        no_fit_stages: bool,
    },
    /// Run detection on one split.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Directory written by train.
        #[arg(long)]
        model: PathBuf,
        /// Model file scoring proposals for rejection; defaults to the
        /// detector itself.
        #[arg(long)]
        first_pass: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        toggles: Toggles,
    },
    /// Score detections against a split's ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Select and average models scored on the same boxes.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: EnsembleMode,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// `NAME=PATH` to a scores file written by detect; repeatable.
        #[arg(long = "member", required = true)]
        members: Vec<String>,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Finite-difference check of every differentiable operation.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Def-pooling against the exhaustive quadratic placement oracle.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        cases: usize,
    },
    /// Step-by-step component benchmark; writes the config,mAP table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        train_images: Option<usize>,
        #[arg(long)]
        val_images: Option<usize>,
    },
}

fn threads_from_env() -> Result<usize, Failure> {
    match std::env::var("DEFNET_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("DEFNET_THREADS must be a non-negative integer, got '{v}'"))),
        Err(_) => Ok(0),
    }
}

fn run() -> Result<(), Failure> {
    let cli = Cli::try_parse().map_err(Failure::from_clap)?;
    defnet::par::init_threads(threads_from_env()?);
    commands::dispatch(cli.command)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Clap(e)) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code())
        }
    }
}
