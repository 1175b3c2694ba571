//! Command-line front end: argument parsing, command dispatch and error
//! reporting for the `poe` binary.

mod commands;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use poe_core::heads::HeadKind;
use poe_core::model::Mode;
use poe_core::ordinal::Metric;

#[derive(Parser, Debug)]
#[command(
    name = "poe",
    version,
    about = "Probabilistic ordinal embedding experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset as CSV.
    Generate {
        /// Flat TOML dataset spec; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on the non-held-out part of a dataset.
    Train {
        #[command(flatten)]
        train: TrainArgs,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model under increasing input corruption.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for report.json, bins.csv and uncertainty.csv.
        #[arg(long)]
        out: PathBuf,
        /// Extra noise levels, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
        corruption: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Which records to evaluate.
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Correlate per-example scores instead of per-bin means.
        #[arg(long)]
        example_level_tau: bool,
    },
    /// Train one model per value of a hyperparameter and tabulate test metrics.
    Sweep {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma separated values for the axis.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// CSV table to write.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Flat TOML training config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long, value_parser = parse_head)]
    head: Option<HeadKind>,
    #[arg(long, value_parser = parse_metric)]
    metric: Option<Metric>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Margin,
    Alpha,
    Beta,
    #[value(name = "T", alias = "t", alias = "samples")]
    T,
    Metric,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: poe_core::Error| e.to_string())
}

fn parse_head(s: &str) -> Result<HeadKind, String> {
    s.parse().map_err(|e: poe_core::Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: poe_core::Error| e.to_string())
}

/// Machine-readable error category: the library error kind when there is
/// one, `config` for malformed config files, otherwise `cli`.
pub fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| {
            c.downcast_ref::<poe_core::Error>()
                .map(poe_core::Error::kind)
                .or_else(|| c.is::<toml::de::Error>().then_some("config"))
        })
        .unwrap_or("cli")
}

pub fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

/// Runs a parsed command; `argv` is recorded in the run manifest.
pub fn run(cli: Cli, argv: Vec<String>) -> anyhow::Result<()> {
    commands::run(cli.command, argv)
}

/// Parses `argv` (program name first) and runs it.
pub fn run_args<I, S>(argv: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv)?;
    run(cli, argv)
}
