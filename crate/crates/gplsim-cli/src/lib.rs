//! Command-line front end for GPLSIM estimation and BEL inference: data
//! ingestion, fitting, confidence intervals, bootstrap bands, simulation
//! studies, cross-validation and the stability report.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod output;
pub mod svg;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::CommandOutcome;
pub use config::{CommonArgs, RunConfig};
pub use error::{CliError, Result};
pub use ingest::ingest_csv;

#[derive(Debug, Parser)]
#[command(
    name = "gplsim",
    version,
    about = "Profile estimation and block empirical likelihood inference for \
             generalized partially linear single-index models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model; writes theta_hat.csv, eta_hat.csv and fit_meta.json.
    Fit {
        /// Input CSV (subject_id,visit,y,x1..xp,z1..zq).
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Confidence intervals for every requested method; writes ci.csv.
    Infer {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Cluster-bootstrap band for the link; writes band.csv and band.svg.
    Band {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Monte Carlo study over a design cell; writes metrics.csv.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Subject-level K-fold cross-validation; writes cv.csv.
    Cv {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// CI-length stability across working correlations; writes stability.csv.
    Stability {
        #[command(flatten)]
        common: CommonArgs,
    },
}

/// Resolves configuration and dispatches one command.
pub fn run(cli: &Cli) -> Result<CommandOutcome> {
    gplsim_core::init_threads();
    match &cli.command {
        Command::Fit { data, common } => {
            let cfg = RunConfig::resolve(common)?;
            commands::cmd_fit(&cfg, data)
        }
        Command::Infer { data, common } => {
            let cfg = RunConfig::resolve(common)?;
            commands::cmd_infer(&cfg, data)
        }
        Command::Band { data, common } => {
            let cfg = RunConfig::resolve(common)?;
            commands::cmd_band(&cfg, data)
        }
        Command::Simulate { common } => {
            let cfg = RunConfig::resolve(common)?;
            commands::cmd_simulate(&cfg)
        }
        Command::Cv { data, common } => {
            let cfg = RunConfig::resolve(common)?;
            commands::cmd_cv(&cfg, data)
        }
        Command::Stability { common } => {
            let cfg = RunConfig::resolve(common)?;
            commands::cmd_stability(&cfg)
        }
    }
}
