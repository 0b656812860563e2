//! `flowgan` command-line pipeline: synthesize trajectories, build OD
//! datasets, train, generate, fit the gravity baseline, evaluate and report.
//!
//! Artifacts land in `<out>/<run-id>/{dataset,checkpoints,generated,reports}`.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use flowgan_core::model::ConditionMode;

use crate::commands::Ctx;
use crate::config::{ModelKind, Overrides, RunConfig};
pub use crate::error::{exit, CliError};

#[derive(Debug, Parser)]
#[command(name = "flowgan", version, about = "Conditional GAN pipeline for origin-destination flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory for runs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub run_id: Option<String>,
    /// Restrict per-map work to one map.
    #[arg(long, global = true)]
    pub map: Option<String>,
    /// Condition label for `generate`.
    #[arg(long, global = true)]
    pub condition: Option<String>,
    /// Samples per condition for `generate`.
    #[arg(long, global = true)]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Synthesize a trajectory CSV.
    Synth,
    /// Aggregate trajectories into per-map OD datasets and split them.
    Build,
    /// Train the conditional model.
    Train,
    /// Train the unconditional baseline.
    TrainUncond,
    /// Generate flows from a trained checkpoint.
    Generate {
        /// Use the unconditional checkpoint.
        #[arg(long)]
        unconditional: bool,
    },
    /// Fit the gravity baseline per map.
    Gravity,
    /// Score generated corpora against the holdout split.
    Evaluate,
    /// Render evaluation tables as markdown.
    Report,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            run_id: self.run_id.clone(),
            condition: self.condition.clone(),
            count: self.count,
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides())?;
    let ctx = Ctx {
        cfg,
        map: cli.map.clone(),
    };
    match cli.command {
        Command::Synth => commands::cmd_synth(&ctx),
        Command::Build => commands::cmd_build(&ctx),
        Command::Train => commands::cmd_train(&ctx, ConditionMode::Conditional),
        Command::TrainUncond => commands::cmd_train(&ctx, ConditionMode::Unconditional),
        Command::Generate { unconditional } => {
            let kind = if unconditional {
                ModelKind::Unconditional
            } else {
                ctx.cfg.generate.model
            };
            commands::cmd_generate(&ctx, kind)
        }
        Command::Gravity => commands::cmd_gravity(&ctx),
        Command::Evaluate => commands::cmd_evaluate(&ctx),
        Command::Report => commands::cmd_report(&ctx),
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    match execute(&cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
