//! `tractaug`: phantom generation, augmentation, training, transfer,
//! prediction, ensembling, evaluation and the end-to-end experiment.
//!
//! Every subcommand writes under `--output-dir` and leaves a `run.json`
//! there recording the command line and the resolved configuration.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 invalid input, 5 training
//! failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tractaug_core::augment::Strategy;
use tractaug_core::Error;

#[derive(Debug, Parser)]
#[command(name = "tractaug", version, about = "Masking augmentation for one-shot tract segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Global {
    /// Master seed (default 0; for `experiment run` it overrides the
    /// config's seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, env = "TRACTAUG_LOG_LEVEL", default_value = "info")]
    pub log_level: String,
    #[arg(long, global = true, env = "TRACTAUG_OUTPUT_DIR", default_value = "tractaug-out")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic phantom subjects with manifests.
    Phantom(PhantomArgs),
    /// Write the synthetic scans of one augmentation strategy.
    Augment(AugmentArgs),
    /// Train the existing-tract model from scratch.
    TrainPretrain(TrainPretrainArgs),
    /// Transfer a pretrained model to novel tracts from one annotated scan.
    Adapt(AdaptArgs),
    /// Segment an image with one model, or several by majority vote.
    Predict(PredictArgs),
    /// Majority vote over label directories.
    Ensemble(EnsembleArgs),
    /// Dice between a prediction and reference labels.
    Dice(DiceArgs),
    /// End-to-end experiment.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

/// A scan given either by manifest entry or by explicit files.
#[derive(Debug, Args, Clone)]
pub struct SampleInput {
    /// Dataset manifest holding the scan.
    #[arg(long, conflicts_with = "image")]
    pub manifest: Option<PathBuf>,
    /// Entry to use from `--manifest` (default: the only or first entry).
    #[arg(long, requires = "manifest")]
    pub sample: Option<String>,
    /// Image file (NIfTI-1, optionally gzipped).
    #[arg(long, requires = "label")]
    pub image: Option<PathBuf>,
    /// Tract label as NAME=PATH; repeat for each tract.
    #[arg(long, value_name = "NAME=PATH")]
    pub label: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Phantom spec JSON; defaults apply to missing fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub n_pretrain: usize,
    #[arg(long, default_value_t = 16)]
    pub n_test: usize,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub input: SampleInput,
    /// rc1, rc2, tc1 or tc2.
    #[arg(long)]
    pub strategy: Strategy,
    /// Number of synthetic scans (default: min(2^N - 1, 100)).
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainPretrainArgs {
    /// Manifest of scans annotated with the existing tracts.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Training config JSON (defaults to the experiment's pretraining stage).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Cft,
    Ift,
    Ours,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Pretrained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest with the single annotated scan of the novel tracts.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Comma-separated strategies for `ours`.
    #[arg(long, value_delimiter = ',', default_value = "rc1,rc2,tc1,tc2")]
    pub strategies: Vec<Strategy>,
    /// Stage config JSON with `warmup` and `finetune` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Leave the real scan out of the Ours warmup.
    #[arg(long)]
    pub synthetic_only_warmup: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model checkpoint; repeat to majority-vote several models.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub image: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Directory of `<tract>.nii.gz` masks; repeat once per model.
    #[arg(long, required = true)]
    pub prediction: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiceArgs {
    /// Directory of predicted `<tract>.nii.gz` masks.
    #[arg(long)]
    pub prediction: PathBuf,
    /// Directory of reference `<tract>.nii.gz` masks.
    #[arg(long)]
    pub truth: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ExperimentCommand {
    /// Run pretraining, CFT, IFT, Ours and the per-strategy ablations.
    Run {
        /// Experiment config JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the default experiment config.
    DefaultConfig,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_INVALID: u8 = 4;
pub const EXIT_TRAINING: u8 = 5;

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::Io { .. } => EXIT_IO,
            Error::Diverged { .. } => EXIT_TRAINING,
            _ => EXIT_INVALID,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.log_level.parse::<log::LevelFilter>() {
        Ok(l) => l,
        Err(_) => {
            eprintln!("error: unknown log level {:?}", cli.global.log_level);
            return ExitCode::from(EXIT_USAGE);
        }
    };
    env_logger::Builder::new().filter_level(level).format_timestamp_millis().init();

    if let Some(n) = cli.global.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(EXIT_IO);
        }
    }

    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{}", e.message);
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
