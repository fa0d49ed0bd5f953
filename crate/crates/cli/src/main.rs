use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod report;
mod svg;

use config::{Mode, PlanKind};
use error::CliError;

#[derive(Parser)]
#[command(name = "beamvision", version, about = "Vision-aided beam selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset and split it.
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Position-regression pretraining of the backbone.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one run into a fresh run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.mode`.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Overrides `plan.kind`.
        #[arg(long, value_enum)]
        plan: Option<PlanArg>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to `<run_dir>/<mode>_<plan>_seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the best checkpoint of a run on the validation split.
    Evaluate {
        run: PathBuf,
        /// Manifest to evaluate on instead of the run's own dataset.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Score oracle labels instead of model predictions.
        #[arg(long)]
        oracle: bool,
    },
    /// Compare runs: accuracy curves, bar chart and summary table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
enum PlanArg {
    Default3,
    FullFinetune,
    FromScratch,
}

impl From<PlanArg> for PlanKind {
    fn from(p: PlanArg) -> Self {
        match p {
            PlanArg::Default3 => PlanKind::Default3,
            PlanArg::FullFinetune => PlanKind::FullFinetune,
            PlanArg::FromScratch => PlanKind::FromScratch,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { config } => commands::generate(&config),
        Command::Pretrain { config } => commands::pretrain(&config),
        Command::Train {
            config,
            mode,
            plan,
            seed,
            out,
        } => commands::train(&config, mode, plan.map(Into::into), seed, out).map(|_| ()),
        Command::Evaluate { run, manifest, oracle } => commands::evaluate(&run, manifest.as_deref(), oracle),
        Command::Report { runs, out } => report::report(&runs, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // keep the error on one line for callers that parse it
            let msg = e.to_string();
            let msg: Vec<&str> = msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            eprintln!("error[{}]: {}", e.category(), msg.join(" "));
            ExitCode::FAILURE
        }
    }
}
