use std::path::PathBuf;
use std::process::ExitCode;

use chainsbi::harness::{self, ExperimentConfig, ValidationKind, PRESETS};
use chainsbi::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "chainsbi", version, about = "Simulation-based inference on passive compartment chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decay constant over the 2D parameter grid.
    Grid(ExperimentArgs),
    /// Measure the target and train the posterior ensemble.
    Infer(ExperimentArgs),
    /// Diagnostics on a finished run directory.
    Validate {
        /// Directory written by `infer`.
        run: PathBuf,
        #[arg(long, value_enum)]
        which: Which,
    },
    /// A single noisy trial; writes traces and observables.
    Simulate {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Comma-separated digital parameters.
        #[arg(long, value_delimiter = ',', required = true)]
        theta: Vec<f64>,
    },
    /// Print a configuration as TOML.
    Config(ExperimentArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Ppc,
    Coverage,
    Amortized,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.master_seed = seed;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Grid(args) => {
            let config = args.resolve()?;
            let grid = harness::cmd_grid(&config)?;
            let (rows, cols) = grid.monotone_fractions();
            let (lo, hi) = grid.tau_range();
            Ok(json!({
                "command": "grid",
                "config_hash": config.hash()?,
                "output_dir": config.output_dir,
                "nodes": grid.leak_axis.len() * grid.axial_axis.len(),
                "monotone_fraction": [rows, cols],
                "tau_range": [lo, hi],
            }))
        }
        Command::Infer(args) => {
            let config = args.resolve()?;
            let outcome = harness::cmd_infer(&config)?;
            Ok(json!({
                "command": "infer",
                "config_hash": outcome.provenance.config_hash,
                "output_dir": config.output_dir,
                "summary": outcome.summary,
            }))
        }
        Command::Validate { run, which } => {
            let kind = match which {
                Which::Ppc => ValidationKind::Ppc,
                Which::Coverage => ValidationKind::Coverage,
                Which::Amortized => ValidationKind::Amortized,
            };
            let outcome = harness::cmd_validate(&run, kind)?;
            Ok(json!({
                "command": "validate",
                "run": run,
                "result": harness::describe(&outcome),
            }))
        }
        Command::Simulate { experiment, theta } => {
            let config = experiment.resolve()?;
            let outcome = harness::cmd_simulate(&config, &theta)?;
            Ok(json!({
                "command": "simulate",
                "output_dir": config.output_dir,
                "observable": outcome.observable,
            }))
        }
        Command::Config(args) => {
            let config = args.resolve()?;
            print!("{}", config.to_toml()?);
            Ok(serde_json::Value::Null)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let hint = matches!(e, Error::Config(_)).then(|| format!("presets: {}", PRESETS.join(", ")));
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string(), "hint": hint }));
            ExitCode::FAILURE
        }
    }
}
