use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfs::cli::{
    parse_config, run_experiment, validate_config, write_report, ConfigError, SectionStatus,
};

#[derive(Parser)]
#[command(
    name = "mfs",
    version,
    about = "Mean-field jump-diffusion control experiments: simulate, verify, report"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment and write report.json, CSV tables, and
    /// a hash manifest into the output directory.
    Run {
        /// Path to the experiment config (JSON).
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Replaces the seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Overrides the particle count.
        #[arg(long)]
        particles: Option<usize>,
        /// Overrides the number of grid steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Parse and validate a config, echoing the filled form on success.
    Validate {
        /// Path to the experiment config (JSON).
        config: PathBuf,
    },
}

fn load(path: &PathBuf) -> Result<mfs::cli::ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.clone(), source })?;
    parse_config(&text)
}

/// Writes a line to stdout, tolerating a closed pipe (`mfs ... | head`):
/// the exit code must reflect the run, not the reader.
fn out(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{line}");
}

/// Stderr counterpart of [`out`].
fn err(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(error) => {
            err(&format!("error[{}]: {error}", error.code()));
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, ConfigError> {
    match cli.command {
        Command::Validate { config } => {
            let validated = validate_config(load(&config)?)?;
            out(&serde_json::to_string_pretty(&validated).expect("config serializes infallibly"));
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config, output_dir, seed_override, particles, steps } => {
            let mut raw = load(&config)?;
            if let Some(seed) = seed_override {
                raw.seeds = vec![seed];
            }
            if let Some(n) = particles {
                raw.particles = n;
            }
            if let Some(m) = steps {
                raw.grid.steps = m;
            }
            let validated = validate_config(raw)?;
            let report = run_experiment(&validated);
            // The output redirect is not an experiment parameter: it stays
            // out of the config echo so payloads depend only on the inputs.
            let dir = output_dir
                .or_else(|| validated.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("mfs_out"));
            write_report(&report, &dir)?;
            for section in &report.sections {
                let status = match section.status {
                    SectionStatus::Pass => "pass",
                    SectionStatus::Fail => "FAIL",
                    SectionStatus::Error => "ERROR",
                };
                match &section.error {
                    Some(message) => {
                        err(&format!("section {}: {status} ({message})", section.name))
                    }
                    None => out(&format!("section {}: {status}", section.name)),
                }
            }
            out(&format!("report: {}", dir.join("report.json").display()));
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
