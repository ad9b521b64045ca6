//! `ctsid`: generate throttle datasets, identify models, run the
//! closed loop and plot the results.

mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ctsid", version, about = "Sparse continuous-time identification of the throttle benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

/// Flags accepted by every subcommand; each one only uses what applies.
#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for dataset and closed-loop noise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    scenarios: Option<usize>,
    /// Noise-to-signal ratio.
    #[arg(long, global = true)]
    nsr: Option<f64>,
    /// Polynomial degree.
    #[arg(long, global = true)]
    degree: Option<usize>,
    /// Candidate orders, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    orders: Option<Vec<usize>>,
    /// Order selection tolerance on p100.
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// Control blocking factor.
    #[arg(long, global = true)]
    kappa: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate excitation scenarios and write CSVs plus a manifest.
    Generate,
    /// Fit every candidate order on a dataset and select one.
    Identify {
        /// Dataset directory written by `generate`.
        dataset: PathBuf,
    },
    /// Run the observer-based controller on the true plant.
    Closedloop {
        /// Model file written by `identify`.
        model: PathBuf,
    },
    /// Render CSV files or dataset directories to SVG.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = cli.common;
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: c.seed,
        scenarios: c.scenarios,
        nsr: c.nsr,
        degree: c.degree,
        orders: c.orders,
        eta: c.eta,
        kappa: c.kappa,
        out: c.out,
    });
    match cli.command {
        Command::Generate => println!("{}", commands::generate(&cfg)?),
        Command::Identify { dataset } => {
            let report = commands::identify_cmd(&cfg, &dataset)?;
            println!("{}", commands::describe_report(&report));
        }
        Command::Closedloop { model } => {
            let summary = commands::closedloop(&cfg, &model)?;
            println!("{}", commands::describe_summary(&summary));
        }
        Command::Plot { inputs } => {
            for path in commands::plot_cmd(&cfg, &inputs)? {
                println!("{}", path.display());
            }
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(2)
        }
    }
}
