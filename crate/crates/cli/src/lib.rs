//! Experiment runner behind the `diablo` binary.
//!
//! Subcommands return a process exit code; configuration problems surface as
//! [`config::ConfigError`] and map to exit code 2.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{ConfigError, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(
    name = "diablo",
    version,
    about = "Train, check and count block-diagonal and low-rank adapters"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// TOML experiment config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an adapter on a synthetic teacher task and write metrics.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Compare median step time of two or more configs.
    Bench {
        /// Config to time; repeat the flag for each config.
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Compare analytic gradients with central differences (f64 only).
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Perturb the first analytic gradient entry; the check must then fail.
        #[arg(long, hide = true)]
        corrupt_grad: bool,
    },
    /// Count trainable parameters and adapter FLOPs.
    Params {
        #[command(flatten)]
        common: Common,
        /// `key=value` expectation, e.g. `fraction=1.04%`, `tol=0.01`, `trainable_params=70254592`.
        #[arg(long = "expect")]
        expects: Vec<String>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
}

fn load(
    path: Option<&PathBuf>,
    seed: Option<u64>,
    out: Option<&PathBuf>,
) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig {
            name: "default".into(),
            ..ExperimentConfig::default()
        },
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn load_common(c: &Common) -> Result<ExperimentConfig, ConfigError> {
    load(c.config.as_ref(), c.seed, c.out.as_ref())
}

/// Runs a parsed command and returns the exit code.
pub fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Train { common } => commands::train::cmd_train(&load_common(&common)?),
        Command::Bench {
            configs,
            seed,
            repeats,
        } => {
            let cfgs = configs
                .iter()
                .map(|p| load(Some(p), seed, None))
                .collect::<Result<Vec<_>, _>>()?;
            commands::bench::cmd_bench(&cfgs, repeats)
        }
        Command::Gradcheck {
            common,
            corrupt_grad,
        } => commands::gradcheck::cmd_gradcheck(&load_common(&common)?, corrupt_grad),
        Command::Params {
            common,
            expects,
            json,
        } => commands::params::cmd_params(&load_common(&common)?, &expects, json),
    }
}

/// Exit code for an error escaping [`run`].
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ConfigError>().is_some() {
        2
    } else {
        1
    }
}
