//! Command-line front end: config loading, run directories and metric
//! summaries.

pub mod config;
pub mod output;
pub mod run;
pub mod summarize;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{parse_config, ConfigError};
use run::Command;

#[derive(Debug, Parser)]
#[command(name = "nap", version, about = "Normalize-and-project training experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Train on the dataset's own labels.
    Train(RunArgs),
    /// Continual training with labels re-randomized at each task.
    Continual(RunArgs),
    /// Projected vs. free twin networks under learning-rate rescaling.
    Twin(RunArgs),
    /// Random-walk model of unit death.
    Randomwalk(RunArgs),
    /// Finite-difference gradient checks.
    Gradcheck(RunArgs),
    /// Aggregate metrics.csv files from several runs.
    Summarize {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Also write the aggregates as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

pub const EXIT_ERROR: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

fn load(path: &std::path::Path) -> anyhow::Result<config::ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    Ok(parse_config(&text)?)
}

fn run_command(command: Command, args: &RunArgs) -> anyhow::Result<i32> {
    let cfg = load(&args.config)?;
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    let outcome = run::execute(command, &cfg, &dir)?;
    let text = std::fs::read_to_string(outcome.dir.join("summary.txt"))?;
    print!("{text}");
    println!("output: {}", outcome.dir.display());
    Ok(outcome.status.exit_code())
}

fn dispatch(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        CliCommand::Train(a) => run_command(Command::Train, &a),
        CliCommand::Continual(a) => run_command(Command::Continual, &a),
        CliCommand::Twin(a) => run_command(Command::Twin, &a),
        CliCommand::Randomwalk(a) => run_command(Command::RandomWalk, &a),
        CliCommand::Gradcheck(a) => run_command(Command::Gradcheck, &a),
        CliCommand::Summarize { files, json } => {
            let summary = summarize::summarize(&files)?;
            print!("{}", summary.table());
            if let Some(path) = json {
                std::fs::write(path, serde_json::to_string_pretty(&summary)? + "\n")?;
            }
            Ok(0)
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                EXIT_CONFIG
            } else {
                EXIT_ERROR
            }
        }
    }
}
