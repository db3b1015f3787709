//! `bevcal` command-line entry point.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on usage or config errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevcal::evaluate::format_metrics_table;
use bevcal::pipeline::{cmd_generate, cmd_run, load_metrics, GenerateConfig, RunConfig, METRICS_FILE};
use bevcal::Error;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bevcal", version, about = "Object-level uncertainty calibration for BEV occupancy grids")]
struct Cli {
    /// Config file: a generator config for `generate`, a run config for `run` and `report`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 0 picks the number of CPUs.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Overrides the generator seed (`generate`) or the split seed (`run`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate,
    /// Run the uncalibrated / pixel-wise / object-wise comparison.
    Run,
    /// Print the metrics of a results directory.
    Report {
        /// Results directory; defaults to `output_dir` of the run config.
        dir: Option<PathBuf>,
        /// Echo metrics.csv instead of the table.
        #[arg(long)]
        csv: bool,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Validation { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn require_config(cli: &Cli) -> Result<&Path, Failure> {
    cli.config.as_deref().ok_or_else(|| Failure::Usage("--config <path> is required".into()))
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    match &cli.command {
        Command::Generate => {
            let mut cfg = GenerateConfig::load(require_config(cli)?)?;
            if let Some(seed) = cli.seed {
                cfg.synth.rng_seed = seed;
            }
            let manifest = cmd_generate(&cfg)?;
            println!("wrote {} frames to {}", manifest.num_frames, cfg.output_dir.display());
        }
        Command::Run => {
            let mut cfg = RunConfig::load(require_config(cli)?)?;
            if let Some(seed) = cli.seed {
                cfg.split.seed = seed;
            }
            let summary = cmd_run(&cfg)?;
            println!("wrote {}", summary.metrics_path.display());
        }
        Command::Report { dir, csv } => {
            let dir = match dir {
                Some(d) => d.clone(),
                None => RunConfig::load(require_config(cli)?)?.output_dir,
            };
            if !dir.join(METRICS_FILE).is_file() {
                return Err(Failure::Usage(format!("no {METRICS_FILE} in {}", dir.display())));
            }
            let rows = load_metrics(&dir)?;
            if *csv {
                let path = dir.join(METRICS_FILE);
                let text = std::fs::read_to_string(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
                print!("{text}");
            } else {
                format_metrics_table(&rows, &mut std::io::stdout().lock())
                    .map_err(|e| Failure::Runtime(e.to_string()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
