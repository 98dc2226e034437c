mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Cross-domain person re-ID with pose-conditioned translation, trained on a
/// synthetic two-domain dataset.
#[derive(Parser, Debug)]
#[command(name = "pdanet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// TOML config with [data], [train], [eval] and [ablate] tables.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.iterations=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-domain dataset.
    SynthData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model, writing checkpoints, losses.jsonl and grids.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `$PDANET_RUN_ROOT/train` (or `runs/train`).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
        /// Replace a non-empty run directory.
        #[arg(long)]
        force: bool,
    },
    /// Rank-1/5/10 and mAP on the target domain.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to evaluate; required unless `--features` is not `model`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Where to write eval.json and eval.txt; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Feature source; `oracle` and `random` are test hooks.
        #[arg(long, value_enum, default_value_t = FeatureSource::Model)]
        features: FeatureSource,
        /// Dimension and seed of `random` features.
        #[arg(long, default_value_t = 16)]
        feature_dim: usize,
        #[arg(long, default_value_t = 0)]
        feature_seed: u64,
    },
    /// Render a translation grid from a checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
        /// Routes such as `s2t`; defaults to all four.
        #[arg(long, value_delimiter = ',')]
        routes: Vec<String>,
        /// Input image indices in each route's content domain.
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 6, 12, 18])]
        inputs: Vec<usize>,
        /// Pose image indices, taken from the same domain as the inputs.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 7, 13, 19, 25, 31])]
        poses: Vec<usize>,
    },
    /// Train and evaluate every configured ablation variant.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `$PDANET_RUN_ROOT/ablate` (or `runs/ablate`).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Subset of variants, overriding `ablate.variants`.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FeatureSource {
    Model,
    /// One-hot identity labels.
    Oracle,
    /// Seeded standard-normal features.
    Random,
}

/// Exit codes: usage and config problems are 1, runtime failures 2.
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn report(self) -> ExitCode {
        let (code, err) = match self {
            Failure::Usage(e) => (1, e),
            Failure::Runtime(e) => (2, e),
        };
        eprintln!("error: {err:#}");
        ExitCode::from(code)
    }
}

pub trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

pub const RUN_ROOT_ENV: &str = "PDANET_RUN_ROOT";

fn default_run_dir(name: &str) -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from).join(name)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::SynthData { config, out, force } => commands::synth_data(&config, &out, force),
        Command::Train { config, data, run_dir, resume, force } => {
            commands::train(&config, &data, &run_dir.unwrap_or_else(|| default_run_dir("train")), resume, force)
        }
        Command::Eval { config, checkpoint, data, out, features, feature_dim, feature_seed } => commands::eval(
            &config,
            checkpoint.as_deref(),
            &data,
            out.as_deref(),
            features,
            feature_dim,
            feature_seed,
        ),
        Command::Translate { checkpoint, data, out, routes, inputs, poses } => {
            commands::translate(&checkpoint, &data, &out, &routes, &inputs, &poses)
        }
        Command::Ablate { config, data, run_dir, variants, force } => {
            commands::ablate(&config, &data, &run_dir.unwrap_or_else(|| default_run_dir("ablate")), &variants, force)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
