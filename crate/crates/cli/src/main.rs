//! `bcl`: experiment runner for branching Ornstein–Uhlenbeck particle
//! systems and their central limit theorems.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{exit, CliError, Run};
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "bcl", version, about = "Spectra, limit variances and CLT checks for branching OU systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenvalues, multiplicities and regime classes of the mean semigroup.
    Spectrum(Common),
    /// Predicted limit variance for the configured test function.
    Variance(Common),
    /// Simulate replicates and summarize populations and functionals.
    Simulate(Common),
    /// Run a limit-law check; exit 0 pass, 1 fail, 2 underpowered.
    Verify(Common),
    /// List the bundled preset configurations.
    Presets,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, value_name = "PATH", conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Use a bundled configuration instead of a file.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Override the configured RNG seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Override the configured number of replicates.
    #[arg(long, value_name = "N")]
    replicates: Option<usize>,
    /// Worker threads for the replicate ensemble.
    #[arg(long, value_name = "N", env = "BCL_THREADS")]
    threads: Option<usize>,
    /// Output directory (overrides output.dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<Run, CliError> {
        let mut config = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path),
            (None, Some(name)) => config::preset(name).and_then(ExperimentConfig::parse),
            (None, None) => unreachable!("clap requires --config or --preset"),
        }
        .map_err(CliError::Config)?;
        if let Some(seed) = self.seed {
            config.scenario.seed = seed;
        }
        if let Some(n) = self.replicates {
            if n == 0 {
                return Err(CliError::Config(anyhow::anyhow!("--replicates must be at least 1")));
            }
            config.scenario.replicates = n;
        }
        let out_dir = commands::resolve_out(&config, self.out.as_deref());
        Ok(Run { config, out_dir })
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let common = match &cli.command {
        Command::Presets => {
            for (name, _) in config::PRESETS {
                println!("{name}");
            }
            return Ok(exit::PASS);
        }
        Command::Spectrum(c) | Command::Variance(c) | Command::Simulate(c) | Command::Verify(c) => c,
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Config(anyhow::anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.into()))?;
    }
    let run = common.resolve()?;
    match cli.command {
        Command::Spectrum(_) => commands::spectrum(&run),
        Command::Variance(_) => commands::variance(&run),
        Command::Simulate(_) => commands::simulate(&run),
        Command::Verify(_) => commands::verify(&run),
        Command::Presets => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::PASS };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
