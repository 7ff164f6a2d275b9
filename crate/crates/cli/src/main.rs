//! `dlrm` command-line entry point.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dlrm_cli::{compare, format_comparison, run, ErrorReport, Horizon, RunConfig, DEFAULT_SAMPLES};
use dlrm_core::error::Error;
use dlrm_core::market_multi::MAX_ITERATIONS;
use dlrm_core::market_single::RatingMode;

#[derive(Parser)]
#[command(name = "dlrm", version, about = "Dynamic-line-rating aware chance-constrained market clearing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clear a case under one or more rating modes and write artifacts.
    Run(RunArgs),
    /// Tabulate cost and emission deltas of completed runs against the first.
    Compare {
        /// Run output directories; every clearing in each is compared.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Case JSON file.
    #[arg(long)]
    case: PathBuf,
    /// Weather CSV replacing the case weather.
    #[arg(long)]
    weather: Option<PathBuf>,
    /// Rating modes (slr, dlr, cc-dlr); repeat or comma-separate. Default: all.
    #[arg(long, value_delimiter = ',')]
    mode: Vec<RatingMode>,
    /// Clear all periods jointly with thermal dynamics and ramps.
    #[arg(long)]
    multi: bool,
    /// Chance-constraint violation level.
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Monte-Carlo seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Run the Monte-Carlo chance-constraint validation.
    #[arg(long)]
    validate: bool,
    /// Monte-Carlo sample count.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    /// Maximum successive-linearization iterations.
    #[arg(long, default_value_t = MAX_ITERATIONS)]
    iters: usize,
}

fn fail(e: &Error) -> ExitCode {
    let report = ErrorReport::from(e);
    eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
    ExitCode::from(2)
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DLRM_LOG", "warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(a) => {
            let cfg = RunConfig {
                case: a.case,
                weather: a.weather,
                modes: if a.mode.is_empty() { RatingMode::ALL.to_vec() } else { a.mode },
                horizon: if a.multi { Horizon::Multi } else { Horizon::Single },
                epsilon: a.epsilon,
                out: a.out,
                seed: a.seed,
                validate: a.validate,
                samples: a.samples,
                max_iterations: a.iters,
            };
            match run(&cfg) {
                Ok(summary) => {
                    emit(&serde_json::to_string_pretty(&summary).expect("summary serializes"));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Compare { runs, out } => match compare(&runs) {
            Ok(rows) => {
                emit(format_comparison(&rows).trim_end());
                if let Some(path) = out {
                    let write = || -> Result<(), Error> {
                        let mut w = csv::Writer::from_path(&path)?;
                        for r in &rows {
                            w.serialize(r)?;
                        }
                        w.flush().map_err(|e| Error::io(&path, e))
                    };
                    if let Err(e) = write() {
                        return fail(&e);
                    }
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
    }
}
