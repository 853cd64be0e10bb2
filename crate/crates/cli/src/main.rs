//! Command-line front-end: simulate scenarios, run the three mapping
//! pipelines over the artifacts, and evaluate trajectories against GNSS.

mod commands;
mod error;
mod manifest;
mod settings;

use clap::{Args, Parser, Subcommand};
use commands::CommonArgs;
use error::AppError;
use settings::Pipeline;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "collabmap",
    about = "Multi-agent collaborative mapping simulation and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SharedArgs {
    /// Named scenario preset (codirected, dataset1-like, dataset2-like,
    /// yaw-loss).
    #[arg(long)]
    preset: Option<String>,
    /// Scenario/config file with `key = value` lines (a manifest works).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed; required with --deterministic.
    #[arg(long)]
    seed: Option<u64>,
    /// Force the reproducible timestamp-ordered execution mode.
    #[arg(long)]
    deterministic: bool,
    /// Output directory (manifest.txt, streams/, maps/, traj/, reports/).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override any config key, e.g. --set features.theta_max=150.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate world, feature streams, and GNSS files for a scenario.
    Simulate(SharedArgs),
    /// Run a mapping pipeline over simulated artifacts.
    Run {
        #[command(flatten)]
        shared: SharedArgs,
        /// Which pipeline to run: offline, otf, or slam.
        #[arg(long)]
        pipeline: String,
    },
    /// Score trajectory files against the GNSS ground truth.
    Evaluate(SharedArgs),
    /// Simulate, run all three pipelines, and emit the combined table.
    Sweep(SharedArgs),
}

fn to_common(shared: &SharedArgs) -> CommonArgs<'_> {
    CommonArgs {
        preset: shared.preset.as_deref(),
        config: shared.config.as_deref(),
        seed: shared.seed,
        deterministic: shared.deterministic,
        out: shared.out.clone(),
        set: &shared.set,
    }
}

fn dispatch(cli: Cli) -> Result<(), AppError> {
    match &cli.command {
        Command::Simulate(shared) => commands::cmd_simulate(&to_common(shared)),
        Command::Run { shared, pipeline } => {
            let pipeline = Pipeline::parse(pipeline)?;
            commands::cmd_run(&to_common(shared), pipeline)
        }
        Command::Evaluate(shared) => commands::cmd_evaluate(&to_common(shared)),
        Command::Sweep(shared) => commands::cmd_sweep(&to_common(shared)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
