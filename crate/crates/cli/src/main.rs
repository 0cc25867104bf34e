//! `digc`: staged pipeline from raw speeds and incidents to speed predictions.

mod config;
mod manifest;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::PipelineConfig;
use manifest::OutputLock;
use stages::Context;

#[derive(Parser)]
#[command(name = "digc", version, about = "Incident-aware traffic speed prediction pipeline")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; each stage writes into its own subdirectory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override a config value, e.g. `--set digc.horizon=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic city with injected incidents.
    Generate,
    /// Build the flow graph and cluster it.
    BuildGraph,
    /// Score incidents and label the critical ones.
    Discover,
    /// Count critical incidents over a grid of thresholds.
    Sweep,
    /// Train the critical-incident classifier.
    TrainClassifier,
    /// Write latent impact features for every incident.
    ExtractFeatures,
    /// Train the speed predictor.
    Train,
    /// Predict test-period speeds with a trained model.
    Predict,
    /// Score a trained model against the baselines.
    Evaluate,
    /// Summarize the metrics written so far.
    Report,
    /// Run every stage in order.
    All,
}

/// Carries the process exit status for failures that are not "other".
#[derive(Debug)]
pub struct ExitError {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for ExitError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for ExitError {}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

impl ExitError {
    pub fn config(message: impl Into<String>) -> anyhow::Error {
        ExitError { code: EXIT_CONFIG, message: message.into() }.into()
    }
}

pub fn missing(path: &Path, stage: &str) -> anyhow::Error {
    ExitError {
        code: EXIT_MISSING,
        message: format!("missing {}; run `digc {stage}` first", path.display()),
    }
    .into()
}

pub fn core_error(e: digc_core::Error) -> anyhow::Error {
    use digc_core::Error as E;
    let code = match &e {
        E::NoConvergence { .. } | E::NonFiniteGradient(_) | E::Numeric(_) => EXIT_NUMERIC,
        E::InvalidInput(_) | E::InfeasibleGeometry(_) | E::Parse { .. } => EXIT_CONFIG,
        E::Checkpoint(_) => EXIT_MISSING,
        _ => return anyhow::Error::new(e),
    };
    ExitError { code, message: e.to_string() }.into()
}

fn run_stage(ctx: &Context, command: Command) -> anyhow::Result<()> {
    match command {
        Command::Generate => stages::generate(ctx),
        Command::BuildGraph => stages::build_graph(ctx),
        Command::Discover => stages::discover_stage(ctx),
        Command::Sweep => stages::sweep_stage(ctx),
        Command::TrainClassifier => stages::train_classifier_stage(ctx),
        Command::ExtractFeatures => stages::extract_features(ctx),
        Command::Train => stages::train(ctx),
        Command::Predict => stages::predict(ctx),
        Command::Evaluate => stages::evaluate_stage(ctx),
        Command::Report => stages::report(ctx),
        Command::All => {
            let external = ctx.cfg.data.speeds.is_some();
            let needs_features = ctx.cfg.digc.variant.incidents();
            let plan = [
                (Command::Generate, !external),
                (Command::BuildGraph, true),
                (Command::Discover, true),
                (Command::Sweep, true),
                (Command::TrainClassifier, needs_features),
                (Command::ExtractFeatures, needs_features),
                (Command::Train, true),
                (Command::Predict, true),
                (Command::Evaluate, true),
                (Command::Report, true),
            ];
            for (stage, wanted) in plan {
                if wanted {
                    run_stage(ctx, stage)?;
                }
            }
            Ok(())
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)
        .map_err(|e| ExitError::config(format!("{e:#}")))?;
    let Some(_lock) = OutputLock::acquire(&cli.out)? else {
        anyhow::bail!(
            "{} is locked by another run; remove {} if that run is gone",
            cli.out.display(),
            cli.out.join(manifest::LOCK_FILE).display()
        );
    };
    let ctx = Context { hash: cfg.hash(), cfg, out: cli.out };
    run_stage(&ctx, cli.command)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<ExitError>().map_or(1, |x| x.code);
            ExitCode::from(code)
        }
    }
}
