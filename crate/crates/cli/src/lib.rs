//! `gvs` command-line driver. Argument parsing and run resolution live here
//! so tests can drive subcommands without spawning processes.

pub mod commands;
pub mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gvs_core::{Error, Result, TrainConfig};
use serde_json::Value;

use crate::commands::*;
use crate::config::{get_path, resolve, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "gvs", version, about = "Pseudo-healthy synthesis with a generator versus segmentor")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file, or a previous run's config.resolved.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Flat override, e.g. `--set generator.base_channels=16`. Values are
    /// parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for overriding the subcommand's primary seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset with healthy references.
    PhantomGen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a generator against a segmentor.
    Train {
        /// Dataset manifest; the train split is used.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write synthesized images and difference maps.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write lesion-enhanced images at one alpha.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train downstream segmentors on enhanced images over an alpha grid.
    Downstream {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Masked PSNR / SSIM of synthesized images.
    EvalIdentity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// A-Dice of inputs, healthy references or synthesized images.
    EvalAdice {
        #[arg(long)]
        data: PathBuf,
        /// Needed when `source` is `synthesized`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// A-Dice of mean-filled and noise-filled counterfeits next to the
    /// healthy and pathological references.
    EvalCounterfeit {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate once per lambda.
    SweepLambda {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Merge run reports into summary.csv and summary.md.
    Report {
        /// Run directories holding report.json.
        runs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Rerun a subcommand from its config.resolved.json.
    Replay {
        resolved: PathBuf,
        /// Defaults to the recorded output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Key in each subcommand's config that `--seed` sets.
fn seed_key(subcommand: &str) -> Option<&'static str> {
    match subcommand {
        "phantom-gen" => Some("phantom.seed"),
        "train" => Some("seed"),
        "eval-counterfeit" => Some("noise_seed"),
        "sweep-lambda" => Some("train.seed"),
        _ => None,
    }
}

fn absolute(p: &Path) -> Result<Value> {
    let abs = std::fs::canonicalize(p).map_err(|e| Error::io(p, e))?;
    Ok(Value::String(abs.display().to_string()))
}

fn resolve_for(subcommand: &str, common: &Common) -> Result<Value> {
    let mut set = common.set.clone();
    if let Some(seed) = common.seed {
        let key = seed_key(subcommand)
            .ok_or_else(|| Error::InvalidConfig(format!("`{subcommand}` has no single seed; use --set")))?;
        set.push(format!("{key}={seed}"));
    }
    let file = common.config.as_deref();
    match subcommand {
        "phantom-gen" => resolve::<PhantomGenConfig>(file, &set),
        "train" => resolve::<TrainConfig>(file, &set),
        "synthesize" => resolve::<SynthConfig>(file, &set),
        "enhance" => resolve::<EnhanceCmdConfig>(file, &set),
        "downstream" => resolve::<DownstreamConfig>(file, &set),
        "eval-identity" => resolve::<IdentityConfig>(file, &set),
        "eval-adice" => resolve::<ADiceCmdConfig>(file, &set),
        "eval-counterfeit" => resolve::<CounterfeitConfig>(file, &set),
        "sweep-lambda" => resolve::<SweepConfig>(file, &set),
        "report" => resolve::<ReportConfig>(file, &set),
        other => Err(Error::InvalidInput(format!("unknown subcommand `{other}`"))),
    }
}

/// Turns parsed arguments into a resolved run. `None` for `replay`.
pub fn to_run(cmd: &Command) -> Result<RunConfig> {
    let mut inputs = BTreeMap::new();
    let (name, common) = match cmd {
        Command::PhantomGen { common } => ("phantom-gen", common),
        Command::Train { data, common } => {
            inputs.insert("data".into(), absolute(data)?);
            ("train", common)
        }
        Command::Synthesize { checkpoint, data, common }
        | Command::Enhance { checkpoint, data, common }
        | Command::Downstream { checkpoint, data, common }
        | Command::EvalIdentity { checkpoint, data, common } => {
            inputs.insert("checkpoint".into(), absolute(checkpoint)?);
            inputs.insert("data".into(), absolute(data)?);
            let name = match cmd {
                Command::Synthesize { .. } => "synthesize",
                Command::Enhance { .. } => "enhance",
                Command::Downstream { .. } => "downstream",
                _ => "eval-identity",
            };
            (name, common)
        }
        Command::EvalAdice { data, checkpoint, common } => {
            inputs.insert("data".into(), absolute(data)?);
            if let Some(c) = checkpoint {
                inputs.insert("checkpoint".into(), absolute(c)?);
            }
            ("eval-adice", common)
        }
        Command::EvalCounterfeit { data, common } => {
            inputs.insert("data".into(), absolute(data)?);
            ("eval-counterfeit", common)
        }
        Command::SweepLambda { data, common } => {
            inputs.insert("data".into(), absolute(data)?);
            ("sweep-lambda", common)
        }
        Command::Report { runs, common } => {
            // missing run dirs are reported as flagged rows, not failures
            let runs = runs.iter().map(|r| absolute(r).unwrap_or_else(|_| Value::String(r.display().to_string())));
            inputs.insert("runs".into(), Value::Array(runs.collect()));
            ("report", common)
        }
        Command::Replay { resolved, out } => {
            let mut run = RunConfig::load(resolved)?;
            if let Some(o) = out {
                run.out = o.clone();
            }
            return Ok(run);
        }
    };
    let config = resolve_for(name, common)?;
    let seed = seed_key(name).and_then(|k| get_path(&config, k)).and_then(Value::as_u64);
    RunConfig::new(name, inputs, config, seed, common.out.clone())
}

/// Writes `config.resolved.json`, then runs the subcommand.
pub fn execute(run: &RunConfig) -> Result<Value> {
    run.write()?;
    log::info!("{} -> {} (config {})", run.subcommand, run.out.display(), &run.config_hash[..12]);
    match run.subcommand.as_str() {
        "phantom-gen" => phantom_gen(run),
        "train" => train(run),
        "synthesize" => synthesize(run),
        "enhance" => enhance(run),
        "downstream" => downstream(run),
        "eval-identity" => eval_identity(run),
        "eval-adice" => eval_adice(run),
        "eval-counterfeit" => eval_counterfeit(run),
        "sweep-lambda" => sweep_lambda(run),
        "report" => report(run),
        other => Err(Error::InvalidInput(format!("unknown subcommand `{other}`"))),
    }
}

pub fn run_cli(cli: &Cli) -> Result<Value> {
    let run = to_run(&cli.command)?;
    execute(&run)
}

/// Machine-readable failure record printed on stderr.
pub fn error_json(e: &Error) -> Value {
    serde_json::json!({
        "status": "error",
        "kind": e.kind(),
        "message": e.to_string(),
    })
}
