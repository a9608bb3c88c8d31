//! `epimix`: simulate, fit and evaluate mixed-effects epidemic models from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use epimix::Error;

mod commands;
mod config;
mod series;

#[derive(Debug, Parser)]
#[command(name = "epimix", version, about)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set saem.burn_in=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run seed; replaces the configuration's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, short, global = true, default_value = ".")]
    out: PathBuf,
    /// Log progress (repeat for more detail).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset from `[model]`, `[theta]` and `[simulate]`.
    Simulate,
    /// Fit the population model by SAEM.
    FitSaem {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit each unit by maximum likelihood and summarise across units.
    FitKm {
        #[arg(long)]
        data: PathBuf,
    },
    /// Importance-sampling log-likelihood of a dataset.
    Loglik {
        #[arg(long)]
        data: PathBuf,
        /// `theta.json` from `fit-saem`; defaults to `[theta]`.
        #[arg(long)]
        theta: Option<PathBuf>,
    },
    /// Post-predictive 5-95% envelope, with coverage when a dataset is given.
    Ppcheck {
        #[arg(long)]
        theta: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Cut a daily surveillance series into epidemic windows.
    Segment {
        /// CSV with columns `date,incidence_per_100k`.
        #[arg(long)]
        series: PathBuf,
        /// Weekly incidence per 100k; replaces `segment.threshold`.
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Parameter(_) | Error::Domain(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 3,
        Error::Integration(_) | Error::Numerical(_) | Error::Convergence(_) => 4,
    }
}

fn run(cli: Cli) -> epimix::Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("workers: {e}")))?;
    }
    let mut overrides = cli.overrides.clone();
    if let Command::Segment { threshold: Some(t), .. } = &cli.command {
        overrides.push(format!("segment.threshold={t:?}"));
    }
    let cfg = config::load(cli.config.as_deref(), &overrides, cli.seed)?;
    let name = match &cli.command {
        Command::Simulate => "simulate",
        Command::FitSaem { .. } => "fit-saem",
        Command::FitKm { .. } => "fit-km",
        Command::Loglik { .. } => "loglik",
        Command::Ppcheck { .. } => "ppcheck",
        Command::Segment { .. } => "segment",
    };
    let out = commands::Output::new(&cli.out, name, &cfg)?;
    match &cli.command {
        Command::Simulate => commands::simulate(&cfg, &out),
        Command::FitSaem { data } => commands::fit_saem(&cfg, data, &out),
        Command::FitKm { data } => commands::fit_km_cmd(&cfg, data, &out),
        Command::Loglik { data, theta } => commands::loglik(&cfg, data, theta.as_deref(), &out),
        Command::Ppcheck { theta, data } => commands::ppcheck(&cfg, theta.as_deref(), data.as_deref(), &out),
        Command::Segment { series, .. } => commands::segment(&cfg, series, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
