use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod report;
mod run;

#[derive(Parser)]
#[command(name = "privfed", version, about = "Private collaborative training simulator")]
struct Cli {
    /// Worker threads for participant training (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the protocol described by a JSON config.
    Run { config: PathBuf },
    /// Train a non-private baseline on the same data split.
    Baseline {
        config: PathBuf,
        which: Which,
        /// Participant trained by the standalone baseline.
        #[arg(long, default_value_t = 0)]
        participant: usize,
    },
    /// Summarize a run log, or every point of a sweep directory.
    Report {
        path: PathBuf,
        /// Metric target for rounds-to-target (default: the run's own).
        #[arg(long)]
        target: Option<f64>,
    },
    /// Run one config per value of a single field.
    Sweep { sweep: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Which {
    Centralized,
    Standalone,
}

/// Exit status classes.
pub enum Failure {
    /// Bad config, bad input files or bad usage; nothing was run.
    Config(anyhow::Error),
    /// Failed after the run started.
    Runtime(anyhow::Error),
}

impl Failure {
    fn report(self) -> ExitCode {
        let (code, err) = match self {
            Failure::Config(e) => (1, e),
            Failure::Runtime(e) => (2, e),
        };
        eprintln!("error: {err:#}");
        ExitCode::from(code)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let result = match cli.command {
        Command::Run { config } => run::cmd_run(&config, threads),
        Command::Baseline {
            config,
            which,
            participant,
        } => run::cmd_baseline(&config, which, participant),
        Command::Report { path, target } => report::cmd_report(&path, target),
        Command::Sweep { sweep } => run::cmd_sweep(&sweep, threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
