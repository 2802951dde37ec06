use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hist_closure::closure::Variant;
use hist_closure::experiment::{cmd_forecast, cmd_hmc, cmd_simulate, cmd_train, cmd_uq_sweep, ExperimentConfig, ForecastSource};
use hist_closure::Result;

#[derive(Parser)]
#[command(name = "histclosure", version, about = "History-based Bayesian closures for two-scale Lorenz '96")]
struct Cli {
    /// Experiment config (JSON). Mutually exclusive with --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Bundled preset: full, desk or toy.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override the output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the closure variant.
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    History,
    Instantaneous,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Checkpoint,
    Chain,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the truth model and write observations.
    Simulate {
        /// Override the observation noise fraction.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Deterministic training.
    Train {
        /// Directory holding observations.csv/json (default: output dir).
        #[arg(long)]
        observations: Option<PathBuf>,
        /// Override the phase-2 rollout depth.
        #[arg(long)]
        n_f: Option<usize>,
    },
    /// Posterior sampling from a checkpoint.
    Hmc {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        observations: Option<PathBuf>,
    },
    /// Forecast and score against the truth.
    Forecast {
        #[arg(long, value_enum, default_value = "checkpoint")]
        source: SourceArg,
        /// Directory holding truth.csv and coupling.csv (default: output dir).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// σ_r over a forcing × noise grid.
    UqSweep {
        #[arg(long, value_delimiter = ',', default_values_t = [5.0, 15.0])]
        forcings: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.03, 0.1])]
        noises: Vec<f64>,
    },
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(_), Some(_)) => {
            return Err(hist_closure::Error::config("config", "give either --config or --preset, not both"))
        }
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => return Err(hist_closure::Error::config("config", "one of --config or --preset is required")),
    };
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(v) = cli.variant {
        cfg.closure.variant = match v {
            VariantArg::History => Variant::History,
            VariantArg::Instantaneous => Variant::Instantaneous,
        };
    }
    match &cli.command {
        Command::Simulate { noise: Some(n) } => cfg.observation.noise_fraction = *n,
        Command::Train { n_f: Some(n), .. } => cfg.train.n_f = *n,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load(cli)?;
    match &cli.command {
        Command::Simulate { .. } => {
            cmd_simulate(&cfg)?;
        }
        Command::Train { observations, .. } => {
            let (_, report) = cmd_train(&cfg, observations.as_deref())?;
            println!("residual variance: {:.6e}", report.residual_variance);
        }
        Command::Hmc {
            checkpoint,
            observations,
        } => {
            cmd_hmc(&cfg, checkpoint.as_deref(), observations.as_deref())?;
        }
        Command::Forecast { source, truth } => {
            let source = match source {
                SourceArg::Checkpoint => ForecastSource::Checkpoint,
                SourceArg::Chain => ForecastSource::Chain,
            };
            let (_, m) = cmd_forecast(&cfg, source, truth.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&m.summary()).expect("summary serializes"));
        }
        Command::UqSweep { forcings, noises } => {
            let (_, table) = cmd_uq_sweep(&cfg, forcings, noises)?;
            for c in &table.cells {
                println!("F = {:>5}, noise = {:>5}: σ_r = {:?}", c.forcing, c.noise_fraction, c.sigma_r);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
