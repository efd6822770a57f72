//! `rbf`: generate synthetic scenes, train field predictors, roll out the
//! localization policy, evaluate, ablate and visualize.
//!
//! Standard output carries exactly one JSON line per run. Logs go to
//! standard error (`RUST_LOG` controls verbosity). Failures print a JSON
//! object with an `error` code and a `message` to standard error and exit
//! with a non-zero status.

mod commands;
mod config;
mod svg;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rbf_core::mdp::Horizon;
use rbf_core::Aggregation;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] rbf_core::scenes::SceneError),
    #[error(transparent)]
    Weights(#[from] rbf_core::model::WeightsError),
    #[error(transparent)]
    Model(#[from] rbf_core::model::ModelError),
    #[error(transparent)]
    Train(#[from] rbf_core::training::TrainError),
    #[error(transparent)]
    Field(#[from] rbf_core::boxfield::FieldIoError),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io(_) => "io",
            CliError::Config(_) => "config",
            CliError::Dataset(_) => "dataset",
            CliError::Weights(_) => "weights",
            CliError::Model(_) => "model",
            CliError::Train(_) => "train",
            CliError::Field(_) => "field",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rbf", version, about = "Hand-conditioned active object localization with relational box fields")]
pub struct Cli {
    /// TOML configuration; flags take precedence over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Near,
    Far,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct RolloutFlags {
    /// Episode length limit: an integer or `inf`.
    #[arg(long)]
    pub horizon: Option<Horizon>,
    #[arg(long)]
    pub terminate_threshold: Option<f64>,
    #[arg(long)]
    pub aggregation: Option<Aggregation>,
}

#[derive(Debug, Clone, Args)]
pub struct FusionFlags {
    #[arg(long)]
    pub t_contact: Option<f64>,
    #[arg(long)]
    pub t_obj: Option<f64>,
}

/// Where box fields come from: a trained predictor or rasterized ground
/// truth, optionally corrupted.
#[derive(Debug, Clone, Args)]
pub struct SourceFlags {
    /// Predictor weight file.
    #[arg(long, conflicts_with = "ground_truth")]
    pub weights: Option<PathBuf>,
    /// Use exact fields rasterized from the annotations.
    #[arg(long)]
    pub ground_truth: bool,
    /// TOML noise spec applied to ground-truth fields.
    #[arg(long, requires = "ground_truth")]
    pub noise_spec: Option<PathBuf>,
    /// Seed of the field corruption.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long)]
        mode: Option<ModeArg>,
        /// Probability of far placement in mixed mode.
        #[arg(long, default_value_t = 0.5)]
        far_probability: f64,
    },
    /// Train a predictor by imitation of the annotated fields.
    TrainIl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        attention: Option<Switch>,
        #[arg(long)]
        steps: Option<usize>,
        /// Start from these weights instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        /// CSV loss log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune a predictor on rollout GIoU.
    TrainRl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Rollout length of the objective (finite).
        #[arg(long)]
        horizon: Option<Horizon>,
        #[arg(long)]
        terminate_threshold: Option<f64>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Roll out the policy for one hand and print the trajectory.
    Rollout {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, default_value_t = 0)]
        hand: usize,
        #[command(flatten)]
        source: SourceFlags,
        #[command(flatten)]
        rollout: RolloutFlags,
        /// Write both fields of the scene as binary dumps into this directory.
        #[arg(long)]
        dump_fields: Option<PathBuf>,
    },
    /// Evaluate tuple AP on a split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[command(flatten)]
        source: SourceFlags,
        #[command(flatten)]
        rollout: RolloutFlags,
        #[command(flatten)]
        fusion: FusionFlags,
        /// Full JSON report with detections and PR curves.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate every predictor × aggregation × horizon combination.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Predictors trained by imitation only.
        #[arg(long = "il-weights")]
        il_weights: Vec<PathBuf>,
        /// Predictors after fine-tuning.
        #[arg(long = "rl-weights")]
        rl_weights: Vec<PathBuf>,
        /// Include rasterized ground-truth fields as a variant.
        #[arg(long)]
        ground_truth: bool,
        #[arg(long, requires = "ground_truth")]
        noise_spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',', default_value = "vote,average,center")]
        aggregations: Vec<Aggregation>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,inf")]
        horizons: Vec<Horizon>,
        #[arg(long)]
        terminate_threshold: Option<f64>,
        #[command(flatten)]
        fusion: FusionFlags,
        /// Label for the dataset column.
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one hand's field predictions, vote and IoU heat map as SVG.
    Viz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, default_value_t = 0)]
        hand: usize,
        #[command(flatten)]
        source: SourceFlags,
        #[command(flatten)]
        rollout: RolloutFlags,
        /// Hand-to-object field dump to draw instead of the source's field.
        #[arg(long)]
        field: Option<PathBuf>,
        /// Number of evenly sampled predictions to draw.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn fail(err: &CliError) -> ! {
    let line = serde_json::json!({ "error": err.code(), "message": err.to_string() });
    eprintln!("{line}");
    std::process::exit(err.exit_code());
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            fail(&CliError::Usage(first.to_string()))
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            fail(&CliError::Usage(format!("cannot configure {n} threads: {e}")));
        }
    }
    match commands::run(&cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => fail(&e),
    }
}
