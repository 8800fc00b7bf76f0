use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use gpufleet::config::{ConfigError, ExperimentConfig, Mode};
use gpufleet::experiment::{self, ExperimentError};

#[derive(Parser)]
#[command(name = "gpufleet", version, about = "Simulated GPU inference fleet experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write timeseries.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Run the config and a set of static fleets; write comparison.csv.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Static replica counts, e.g. 1,2,5,10.
        #[arg(long = "static", value_delimiter = ',', required = true)]
        statics: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the reference configuration.
    DefaultConfig,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Core(_) | ExperimentError::Mismatch(_) => Failure::Config(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path)
        .map_err(|e: ConfigError| Failure::Config(anyhow::Error::new(e).context(format!("config {}", path.display()))))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, out, seed, mode } => {
            let mut cfg = load(&config)?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.mode = mode.unwrap_or(cfg.mode);
            tracing::info!(mode = ?cfg.mode, seed = cfg.seed, "running {}", config.display());
            let result = experiment::run_experiment(&cfg)?;
            experiment::write_outputs(&out, &result)?;
            let s = &result.summary;
            println!(
                "{}: mean latency {:.4}s, p99 {:.4}s, utilization {:.3}, {:.1} replica-seconds -> {}",
                s.label,
                s.mean_end_to_end_latency_s,
                s.p99_latency_s,
                s.mean_gpu_utilization,
                s.replica_seconds,
                out.display()
            );
        }
        Command::Compare { config, statics, out } => {
            let cfg = load(&config)?;
            let rows = experiment::compare(&cfg, &statics)?;
            let csv = experiment::comparison_csv(&rows)?;
            std::fs::create_dir_all(&out)
                .and_then(|_| std::fs::write(out.join("comparison.csv"), &csv))
                .with_context(|| format!("writing {}", out.display()))
                .map_err(Failure::Runtime)?;
            print!("{}", String::from_utf8_lossy(&csv));
        }
        Command::DefaultConfig => print!("{}", gpufleet::config::REFERENCE_TOML),
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
