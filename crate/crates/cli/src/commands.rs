//! The four pipeline commands as library functions over a resolved
//! [`RunConfig`].

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::info;
use nucseg_core::io::{load_intensity, save_volume};
use nucseg_core::phantom::{generate_dataset, SplitPlan};
use nucseg_core::preprocess::{prepare_subject, Affine};
use nucseg_core::{DatasetManifest, Split};
use nucseg_nn::checkpoint::Checkpoint;
use nucseg_nn::data::{load_split, Subject};
use nucseg_nn::evaluate::{evaluate_subject, paired_values, report_rows, summarize, write_report, Summary};
use nucseg_nn::infer::{predict_volume, time_inference};
use nucseg_nn::train::{train_on, write_log_csv, EpochLog, LabeledVolume, TrainOutcome};
use nucseg_nn::NnError;

use crate::config::RunConfig;
use crate::render::{save_overlay, scatter_plot};

pub const RESOLVED_CONFIG: &str = "config.resolved.yaml";
pub const CHECKPOINT: &str = "best.ckpt";
pub const LOG: &str = "log.csv";

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Writes the resolved configuration next to the outputs.
pub fn snapshot(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(RESOLVED_CONFIG);
    cfg.save(&path)?;
    Ok(path)
}

fn manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg.paths.manifest.as_deref().context("a dataset manifest is required (--manifest)")?;
    Ok(DatasetManifest::load(path)?)
}

/// Generates a phantom dataset; returns its manifest path.
pub fn cmd_phantom(cfg: &RunConfig) -> Result<PathBuf> {
    ensure!(cfg.phantom.subjects >= 1, "at least one subject is required");
    let dir = out_dir(cfg)?;
    let plan = SplitPlan::for_subjects(cfg.phantom.subjects);
    let m = generate_dataset(plan, &cfg.phantom.spec, &cfg.phantom.jitter, cfg.seed, &dir)?;
    snapshot(cfg, &dir)?;
    let c = m.counts();
    info!("wrote {} subjects ({} train, {} val, {} test) to {}", m.entries.len(), c.train, c.val, c.test, dir.display());
    Ok(dir.join("manifest.json"))
}

fn labeled(subjects: &[Subject]) -> Vec<LabeledVolume> {
    subjects
        .iter()
        .map(|s| LabeledVolume {
            image: s.prepared.image.clone(),
            label: s.prepared.label.clone().expect("manifest subjects carry labels"),
        })
        .collect()
}

#[derive(Debug)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub outcome: TrainOutcome,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let dir = out_dir(cfg)?;
    snapshot(cfg, &dir)?;
    let m = manifest(cfg)?;
    let train = load_split(&m, Split::Train, &cfg.preprocess, &cfg.scheme)?;
    let val = load_split(&m, Split::Val, &cfg.preprocess, &cfg.scheme)?;
    ensure!(!train.is_empty() && !val.is_empty(), "the manifest needs non-empty train and val splits");
    let spec = cfg.model_spec();
    info!(
        "training {} (rate {}, {} channels, {} parameters) on {} subjects",
        spec.family,
        spec.rate,
        spec.in_channels,
        nucseg_nn::Model::<f32>::build(spec, 0)?.count_parameters(),
        train.len()
    );
    let log_path = dir.join(LOG);
    let mut rows: Vec<EpochLog> = Vec::new();
    let outcome = train_on(spec, &labeled(&train), &labeled(&val), &cfg.train, |row, _| {
        rows.push(*row);
        if let Err(e) = write_log_csv(&rows, &log_path) {
            log::warn!("could not update {}: {e}", log_path.display());
        }
    })?;
    write_log_csv(&outcome.log, &log_path)?;
    let ck = Checkpoint {
        model: outcome.best.clone(),
        scheme: cfg.scheme.clone(),
        preprocess: cfg.preprocess.clone(),
        patch: cfg.patch,
        metadata: serde_json::json!({
            "best_epoch": outcome.best_epoch,
            "best_val_loss": outcome.best_val_loss,
            "epochs": outcome.log.len(),
            "stop": outcome.stop,
            "seed": cfg.seed,
        }),
    };
    let checkpoint = dir.join(CHECKPOINT);
    ck.save(&checkpoint)?;
    info!("best epoch {} (val {:.5}); checkpoint {}", outcome.best_epoch, outcome.best_val_loss, checkpoint.display());
    Ok(TrainReport {
        checkpoint,
        log_path,
        outcome,
    })
}

/// Images of one subject to segment.
#[derive(Debug, Clone)]
pub struct InferInput {
    pub id: String,
    pub qsm: PathBuf,
    pub t1: Option<PathBuf>,
}

fn load_checkpoint(cfg: &RunConfig) -> Result<(PathBuf, Checkpoint<f32>)> {
    let path = cfg.paths.checkpoint.clone().context("a checkpoint is required (--checkpoint)")?;
    let ck = Checkpoint::load(&path)?;
    Ok((path, ck))
}

/// Segments each input; writes `<id>_pred.nii.gz` and, unless disabled,
/// `<id>_overlay.png`. Returns the written label paths.
pub fn cmd_infer(cfg: &RunConfig, inputs: &[InferInput]) -> Result<Vec<PathBuf>> {
    ensure!(!inputs.is_empty(), "no subjects to segment");
    let dir = out_dir(cfg)?;
    snapshot(cfg, &dir)?;
    let (ck_path, ck) = load_checkpoint(cfg)?;
    let mode = ck.preprocess.input_mode;
    let mut written = Vec::new();
    for input in inputs {
        if mode.needs_t1() && input.t1.is_none() {
            return Err(NnError::ChannelMismatch {
                expected: ck.model.spec.in_channels,
                found: ck.model.spec.in_channels - 1,
            })
            .with_context(|| format!("checkpoint expects {mode} input but subject {} has no T1", input.id));
        }
        let qsm = load_intensity(&input.qsm)?;
        let t1 = match (&input.t1, mode.needs_t1()) {
            (Some(p), true) => Some(load_intensity(p)?),
            _ => None,
        };
        let prepared = prepare_subject(Some(&qsm), t1.as_ref(), None, &Affine::identity(), &ck.preprocess)?;
        let result = predict_volume(&ck.model, &prepared, &ck.patch, &ck_path.display().to_string())?;
        let path = dir.join(format!("{}_pred.nii.gz", input.id));
        save_volume(&result.label, &path)?;
        if cfg.overlays {
            save_overlay(&qsm, &result.label, &dir.join(format!("{}_overlay.png", input.id)))?;
        }
        info!("{}: segmented in {:.3} s", input.id, result.seconds);
        written.push(path);
    }
    Ok(written)
}

/// Inputs of every subject in `split` of the configured manifest.
pub fn manifest_inputs(cfg: &RunConfig, split: Split) -> Result<Vec<InferInput>> {
    let m = manifest(cfg)?;
    Ok(m.split(split)
        .map(|e| InferInput {
            id: e.id.clone(),
            qsm: m.resolve(&e.qsm),
            t1: e.t1.as_ref().map(|p| m.resolve(p)),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSource {
    Checkpoint,
    /// Ground truth passed through as the prediction.
    Oracle,
}

/// Evaluates `split`; writes `report.csv`, `summary.json` and scatter PNGs.
pub fn cmd_evaluate(cfg: &RunConfig, split: Split, source: EvalSource, repetitions: usize) -> Result<Summary> {
    let dir = out_dir(cfg)?;
    snapshot(cfg, &dir)?;
    let m = manifest(cfg)?;
    let ck = match source {
        EvalSource::Checkpoint => Some(load_checkpoint(cfg)?),
        EvalSource::Oracle => None,
    };
    let pre = ck.as_ref().map_or(&cfg.preprocess, |(_, c)| &c.preprocess);
    let scheme = ck.as_ref().map_or(&cfg.scheme, |(_, c)| &c.scheme);
    let subjects = load_split(&m, split, pre, scheme)?;
    if subjects.is_empty() {
        bail!("split {split} of {} is empty", cfg.paths.manifest.as_deref().unwrap_or(Path::new("?")).display());
    }
    let mut evals = Vec::with_capacity(subjects.len());
    for s in &subjects {
        let truth = s.label.as_ref().context("evaluation needs labels")?;
        let pred = match &ck {
            Some((path, c)) => predict_volume(&c.model, &s.prepared, &c.patch, &path.display().to_string())?.label,
            None => truth.clone(),
        };
        let e = evaluate_subject(&s.id, &pred, truth, &s.qsm, scheme)?;
        info!("{}: mean foreground Dice {:.4}", s.id, e.dice.iter().sum::<f64>() / e.dice.len() as f64);
        if cfg.overlays {
            save_overlay(&s.qsm, &pred, &dir.join(format!("{}_overlay.png", s.id)))?;
        }
        evals.push(e);
    }
    let timing = match &ck {
        Some((_, c)) => {
            let refs: Vec<&Subject> = subjects.iter().collect();
            Some(time_inference(&c.model, &refs, &c.preprocess, &c.patch, repetitions)?)
        }
        None => None,
    };
    let summary = summarize(&evals, scheme, timing.as_ref())?;
    write_report(&dir, &report_rows(&evals, scheme), &summary)?;
    if cfg.overlays {
        for (name, volume, fit) in [
            ("susceptibility", false, summary.susceptibility_regression.as_ref()),
            ("volume", true, summary.volume_regression.as_ref()),
        ] {
            let (x, y) = paired_values(&evals, scheme, volume);
            let path = dir.join(format!("scatter_{name}.png"));
            scatter_plot(&x, &y, fit, 400)
                .save(&path)
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    if let Some(t) = &timing {
        info!("inference time {t}");
    }
    Ok(summary)
}
