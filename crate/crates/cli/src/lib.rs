//! Command-line surface for metafbp: data generation, stage-1 training,
//! meta-training, baselines, evaluation, ablations and gradient checks.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model_io;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{BaselineKind, Context, Outcome};
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::gradcheck::Fault;

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "metafbp",
    version,
    about = "Few-shot personalized preference regression with a meta-learned high-order predictor"
)]
pub struct Cli {
    /// Config file, or any artifact with an embedded config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set meta.high_order.lambda=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its ground-truth sidecar.
    GenData,
    /// Train the feature extractor on mode labels of the training users.
    Stage1,
    /// Meta-train the high-order predictor.
    MetaTrain {
        #[arg(long)]
        extractor: Option<PathBuf>,
    },
    /// Train a baseline over the same extractor.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[arg(long)]
        extractor: Option<PathBuf>,
    },
    /// Meta-test a trained model on the test users.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Evaluate one model at each support size in `ablation.cross_shots`.
    CrossShot {
        #[arg(long)]
        model: PathBuf,
    },
    /// Meta-train and evaluate once per value in `ablation.lambdas`.
    AblateLambda {
        #[arg(long)]
        extractor: Option<PathBuf>,
    },
    /// Query PC and support loss for inner steps `0..=ablation.k_max`.
    AblateK {
        #[arg(long)]
        model: PathBuf,
    },
    /// Compare every analytic gradient with central finite differences.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Print the resolved configuration.
    ShowConfig,
    /// Print the default configuration with provenance notes.
    DefaultConfig,
}

pub fn execute(cli: &Cli) -> CliResult<Outcome> {
    let text = |s: String| {
        Ok(Outcome {
            files: vec![],
            summary: s,
        })
    };
    match &cli.command {
        Command::DefaultConfig => return text(config::annotated_default()),
        Command::Gradcheck { inject_fault } => {
            let fault = if *inject_fault {
                Fault::GeneratorSignFlip
            } else {
                Fault::None
            };
            return commands::gradcheck(fault);
        }
        _ => {}
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    let ctx = Context::new(cfg, &cli.out);
    match &cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Stage1 => commands::stage1(&ctx),
        Command::MetaTrain { extractor } => commands::meta_train_cmd(&ctx, extractor.as_deref()),
        Command::Baseline { kind, extractor } => {
            commands::baseline(&ctx, *kind, extractor.as_deref())
        }
        Command::Eval { model } => commands::eval_cmd(&ctx, model),
        Command::CrossShot { model } => commands::cross_shot(&ctx, model),
        Command::AblateLambda { extractor } => commands::ablate_lambda(&ctx, extractor.as_deref()),
        Command::AblateK { model } => commands::ablate_k(&ctx, model),
        Command::ShowConfig => text(ctx.config_text.clone()),
        Command::Gradcheck { .. } | Command::DefaultConfig => unreachable!(),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> CliResult<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    execute(&cli)
}
