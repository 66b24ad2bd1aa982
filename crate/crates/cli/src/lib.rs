//! Command-line driver: trains variant matrices, analyzes runs, evaluates
//! quantized checkpoints and runs the theorem suites.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod exit;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::anyhow;
use clap::{Parser, Subcommand};
use oasis_core::Granularity;
use oasis_theory::Suite;

use crate::config::{parse_quant, ExperimentConfig};
use crate::exit::Failure;

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  usage, configuration or output-directory error
  3  missing artifacts (nothing analyzable)
  4  theorem-suite bound violations
  5  training or evaluation failure";

#[derive(Debug, Parser)]
#[command(name = "oasis-lab", version, about = "Null-routing attention experiments", after_help = EXIT_HELP)]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true, env = "OASIS_LAB_OUT")]
    pub out_dir: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every seed and variant in the config.
    Train,
    /// Outlier, sink, pathology and depth reports plus heatmaps.
    Analyze {
        /// Experiment directory (defaults to the output directory).
        run_dir: Option<PathBuf>,
    },
    /// Run a theorem suite.
    Theory {
        #[arg(value_parser = ["lemma1", "thm2", "lemma2", "thm3", "proposition", "all"])]
        suite: String,
        /// Instances per suite.
        #[arg(long, default_value_t = 10_000)]
        n: usize,
    },
    /// Perplexity of every checkpoint under fake quantization.
    Quant {
        /// Experiment directory (defaults to the output directory).
        run_dir: Option<PathBuf>,
        /// Specs such as W8A8; defaults to the config.
        #[arg(long = "spec")]
        specs: Vec<String>,
        /// Weight scale groups: tensor or channel.
        #[arg(long)]
        granularity: Option<String>,
    },
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(Failure::config)?,
        None => ExperimentConfig::default_experiment(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(d) = &cli.out_dir {
        cfg = cfg.with_out_dir(d.clone());
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Train => {
            let runs = commands::cmd_train(&cfg)?;
            println!("trained {} run(s) into {}", runs.len(), cfg.out_dir.display());
        }
        Command::Analyze { run_dir } => {
            let dir = run_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let opts = if cli.config.is_some() {
                cfg.metrics.clone()
            } else {
                commands::metrics_for(&dir, None).map_err(Failure::config)?.metrics
            };
            let analyses = commands::cmd_analyze(&dir, &opts)?;
            println!("analyzed {} run(s); comparison in {}", analyses.len(), dir.join(artifacts::COMPARISON_FILE).display());
        }
        Command::Theory { suite, n } => {
            let suites: Vec<Suite> = match Suite::parse(suite) {
                Some(s) => vec![s],
                None => Suite::ALL.to_vec(),
            };
            commands::cmd_theory(&cfg.out_dir, &suites, *n, cli.seed.unwrap_or(0))?;
        }
        Command::Quant {
            run_dir,
            specs,
            granularity,
        } => {
            let dir = run_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let specs = if specs.is_empty() && granularity.is_none() {
                cfg.quant.clone()
            } else {
                let g = match granularity.as_deref() {
                    None => Granularity::PerTensor,
                    Some(s) => Granularity::parse(s)
                        .ok_or_else(|| Failure::config(anyhow!("unknown granularity '{s}' (tensor, channel)")))?,
                };
                let labels: Vec<String> = if specs.is_empty() { cfg.raw.quant.specs.clone() } else { specs.clone() };
                labels
                    .iter()
                    .map(|l| parse_quant(l, g))
                    .collect::<anyhow::Result<Vec<_>>>()
                    .map_err(Failure::config)?
            };
            let rows = commands::cmd_quant(&dir, &specs)?;
            println!("{} quantized evaluation(s) in {}", rows.len(), dir.join(artifacts::QUANT_FILE).display());
        }
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code() as u8;
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.jobs {
        Some(0) => Err(Failure::config(anyhow!("--jobs must be positive"))),
        Some(j) => match rayon::ThreadPoolBuilder::new().num_threads(j).build() {
            Ok(pool) => pool.install(|| execute(&cli)),
            Err(e) => Err(Failure::runtime(anyhow!(e))),
        },
        None => execute(&cli),
    };
    match outcome {
        Ok(()) => exit::OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}
