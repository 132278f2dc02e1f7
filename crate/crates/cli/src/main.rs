//! `vif`: experiment runner for the filtering engine, the bypass harness,
//! rule distribution and the AS-level coverage simulations.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "vif", version, about = "Auditable in-network filtering experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct GlobalOpts {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "vif-out")]
    #[serde(skip)]
    pub out: PathBuf,
    /// Worker threads for commands that can parallelise.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Format of the main result table.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Progress messages on stderr; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Run a rule file over a packet trace with a single filter.
    FilterRun(commands::FilterRunArgs),
    /// Run an adversarial scenario file and report bypass verdicts.
    BypassDemo(commands::BypassDemoArgs),
    /// Distribute rules over filter instances.
    Distribute(commands::DistributeArgs),
    /// Run a filter cluster over growing synthetic traffic.
    ClusterSim(commands::ClusterSimArgs),
    /// Share of attack sources whose path to the victim crosses a top IXP.
    Coverage(commands::CoverageArgs),
    /// Number of alternative AS paths found by single-AS exclusion.
    Altpaths(commands::AltpathsArgs),
}

/// Failure classes, mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Infeasible(String),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Infeasible(m)) => {
            eprintln!("infeasible: {m}");
            ExitCode::from(3)
        }
    }
}
