mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing::Level;

use crate::config::{load_config, resolve_run, resolve_sim, RunArgs, SimArgs};
use crate::error::CliError;

/// Environment variable holding the log level (`error`, `warn`, `info`, `debug`, `trace`).
const LOG_ENV: &str = "CSC_LOG";

#[derive(Debug, Parser)]
#[command(name = "csc", version, about = "Calibrated act-or-escalate decisions over multi-agent debates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic debate corpus as JSON Lines.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Split each partition and compute per-round thresholds.
    Calibrate {
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Apply a calibration to the test split and write report tables.
    Evaluate {
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restrict to these levels; defaults to the config file, then every calibrated level.
        #[arg(long = "alpha")]
        alphas: Vec<f64>,
    },
    /// Run debates over a question file with synthetic and/or remote agents.
    Debate {
        #[arg(long)]
        questions: PathBuf,
        /// TOML file with `labels`, optional `rounds` and `[[agents]]` tables.
        #[arg(long)]
        agents: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Count parsed, renormalized and fallback responses in a transcript.
    ParseReport {
        #[arg(long)]
        transcripts: PathBuf,
    },
}

fn init_logging() {
    let level = std::env::var(LOG_ENV).ok().and_then(|v| v.parse::<Level>().ok()).unwrap_or(Level::WARN);
    let _ = tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).try_init();
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Simulate { out, run, sim } => {
            let file = load_config(run.config.as_deref())?;
            let params = resolve_sim(&sim, &run, &file)?;
            commands::simulate(&params, &out)
        }
        Command::Calibrate { transcripts, out, run } => {
            let file = load_config(run.config.as_deref())?;
            let resolved = resolve_run(&run, &file)?;
            commands::calibrate(&transcripts, &resolved.run, &resolved.partition_key, &out)
        }
        Command::Evaluate { transcripts, calibration, out_dir, config, alphas } => {
            let file = load_config(config.as_deref())?;
            let alphas = if alphas.is_empty() { file.alphas.unwrap_or_default() } else { alphas };
            commands::evaluate(&transcripts, &calibration, &alphas, &out_dir)
        }
        Command::Debate { questions, agents, out, rounds } => commands::debate(&questions, &agents, rounds, &out),
        Command::ParseReport { transcripts } => commands::parse_report(&transcripts),
    }
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
