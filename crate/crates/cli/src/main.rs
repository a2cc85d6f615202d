mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{load, ExperimentConfig};
use crate::error::CliResult;

#[derive(Parser)]
#[command(name = "tcsis", version, about = "Train and sample concrete-score samplers for lattice models")]
struct Cli {
    /// Worker threads (0 uses every core).
    #[arg(long, global = true, env = "TCSIS_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.beta=0.28`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (defaults to `output_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Compare exact scores, Monte-Carlo scores and kernel forms on an enumerable model.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// Monte-Carlo sample counts to report.
        #[arg(long, value_delimiter = ',', default_value = "100,1000,10000")]
        mc_samples: Vec<usize>,
    },
    /// Train a score or density network.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Draw samples by simulating the reverse chain.
    Sample {
        #[command(flatten)]
        common: Common,
        /// `oracle`, `mc:N` or a checkpoint path (overrides `sampler.source`).
        #[arg(long)]
        source: Option<String>,
    },
    /// Run Glauber or GWG chains.
    Mcmc {
        #[command(flatten)]
        common: Common,
    },
    /// Correlation, magnetization and distance reports for a sample file.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// Sample CSV to evaluate.
        #[arg(long)]
        samples: PathBuf,
        /// Reference sample CSV; the exact distribution is used when omitted.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Ground truth, GWG baseline, both trained samplers and reports for a 4×4 preset.
    Reproduce {
        /// l4-high, l4-critical or l4-low.
        preset: String,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, base: Option<serde_json::Value>) -> CliResult<(ExperimentConfig, PathBuf)> {
    let cfg = load(common.config.as_deref(), &common.overrides, base)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn run(cli: Cli) -> CliResult<()> {
    tcsis_core::par::init_threads(cli.threads)?;
    match cli.command {
        Command::OracleCheck { common, mc_samples } => {
            let (cfg, out) = resolve(&common, None)?;
            commands::oracle_check(&cfg, &out, &mc_samples)
        }
        Command::Train { common } => {
            let (cfg, out) = resolve(&common, None)?;
            commands::train_cmd(&cfg, &out)
        }
        Command::Sample { common, source } => {
            let (mut cfg, out) = resolve(&common, None)?;
            if let Some(s) = source {
                cfg.sampler.source = s;
            }
            commands::sample_cmd(&cfg, &out)
        }
        Command::Mcmc { common } => {
            let (cfg, out) = resolve(&common, None)?;
            commands::mcmc_cmd(&cfg, &out)
        }
        Command::Metrics { common, samples, reference } => {
            let (cfg, out) = resolve(&common, None)?;
            commands::metrics_cmd(&cfg, &samples, reference.as_deref(), &out)
        }
        Command::Reproduce { preset, common } => {
            let base = if common.config.is_none() { Some(commands::preset_config(&preset)?) } else { None };
            commands::preset_beta(&preset)?;
            let (cfg, out) = resolve(&common, base)?;
            commands::reproduce_cmd(&cfg, &preset, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
