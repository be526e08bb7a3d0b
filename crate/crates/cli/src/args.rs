//! Command-line flags and their application onto a [`RunConfig`].

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use nucseg_core::{InputMode, Split};
use nucseg_nn::Family;

use crate::commands::{cmd_evaluate, cmd_infer, cmd_phantom, cmd_train, manifest_inputs, EvalSource, InferInput};
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "nucseg", version, about = "Gray-matter nucleus segmentation from QSM and T1-weighted images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    Phantom(PhantomArgs),
    /// Train a model; writes the best checkpoint and a CSV loss log.
    Train(TrainArgs),
    /// Segment subjects with a checkpoint.
    Infer(InferArgs),
    /// Score a checkpoint (or the ground truth itself) on a labelled split.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// YAML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Compute device; only `cpu` is available.
    #[arg(long)]
    pub device: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub family: Option<Family>,
    /// Global-branch downsampling rate.
    #[arg(long, value_parser = parse_rate)]
    pub rate: Option<usize>,
    #[arg(long)]
    pub input_mode: Option<InputMode>,
    /// Channels of the first level.
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PhantomArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub subjects: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Upper bound on epochs (default: run to the learning-rate floor).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patches_per_subject: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// QSM of a single subject.
    #[arg(long, conflicts_with = "manifest")]
    pub qsm: Option<PathBuf>,
    #[arg(long, requires = "qsm")]
    pub t1: Option<PathBuf>,
    #[arg(long, default_value = "subject", requires = "qsm")]
    pub id: String,
    /// Segment a manifest split instead of a single subject.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub no_overlays: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Use the ground truth as the prediction.
    #[arg(long)]
    pub oracle: bool,
    /// Timed passes over the split after one warm-up run.
    #[arg(long, default_value_t = 1)]
    pub repetitions: usize,
    #[arg(long)]
    pub no_overlays: bool,
}

fn parse_rate(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(r @ (1 | 2 | 4)) => Ok(r),
        _ => Err(format!("rate must be one of 1, 2, 4 (got {s})")),
    }
}

fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.paths.out = Some(o.clone());
    }
    if let Some(d) = &common.device {
        cfg.device = d.clone();
    }
    Ok(cfg)
}

fn apply_model(cfg: &mut RunConfig, m: &ModelArgs) {
    if let Some(f) = m.family {
        cfg.model.family = f;
    }
    if let Some(r) = m.rate {
        cfg.model.rate = r;
    }
    if let Some(mode) = m.input_mode {
        cfg.preprocess.input_mode = mode;
    }
    if m.width.is_some() {
        cfg.model.base_width = m.width;
    }
}

/// Merged and validated configuration of a command.
pub fn resolve(command: &Command) -> Result<RunConfig> {
    let cfg = match command {
        Command::Phantom(a) => {
            let mut cfg = base_config(&a.common)?;
            if let Some(n) = a.subjects {
                cfg.phantom.subjects = n as usize;
            }
            cfg
        }
        Command::Train(a) => {
            let mut cfg = base_config(&a.common)?;
            apply_model(&mut cfg, &a.model);
            if let Some(m) = &a.manifest {
                cfg.paths.manifest = Some(m.clone());
            }
            if a.epochs.is_some() {
                cfg.train.max_epochs = a.epochs;
            }
            if let Some(p) = a.patches_per_subject {
                cfg.train.patches_per_subject = p;
            }
            cfg
        }
        Command::Infer(a) => {
            let mut cfg = base_config(&a.common)?;
            if let Some(c) = &a.checkpoint {
                cfg.paths.checkpoint = Some(c.clone());
            }
            if let Some(m) = &a.manifest {
                cfg.paths.manifest = Some(m.clone());
            }
            cfg.overlays &= !a.no_overlays;
            cfg
        }
        Command::Evaluate(a) => {
            let mut cfg = base_config(&a.common)?;
            if let Some(c) = &a.checkpoint {
                cfg.paths.checkpoint = Some(c.clone());
            }
            if let Some(m) = &a.manifest {
                cfg.paths.manifest = Some(m.clone());
            }
            cfg.overlays &= !a.no_overlays;
            cfg
        }
    };
    cfg.resolve()
}

/// Resolves, echoes the configuration to stdout and runs the command.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.command)?;
    println!("{}", cfg.to_yaml());
    match &cli.command {
        Command::Phantom(_) => {
            let manifest = cmd_phantom(&cfg)?;
            println!("manifest: {}", manifest.display());
        }
        Command::Train(_) => {
            let r = cmd_train(&cfg)?;
            println!("checkpoint: {}", r.checkpoint.display());
            println!("log: {}", r.log_path.display());
        }
        Command::Infer(a) => {
            let inputs = match &a.qsm {
                Some(q) => vec![InferInput {
                    id: a.id.clone(),
                    qsm: q.clone(),
                    t1: a.t1.clone(),
                }],
                None => manifest_inputs(&cfg, a.split)?,
            };
            for p in cmd_infer(&cfg, &inputs)? {
                println!("label: {}", p.display());
            }
        }
        Command::Evaluate(a) => {
            let source = if a.oracle { EvalSource::Oracle } else { EvalSource::Checkpoint };
            let summary = cmd_evaluate(&cfg, a.split, source, a.repetitions)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}
