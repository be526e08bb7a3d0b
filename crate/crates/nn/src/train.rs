//! Patch-based training with Adam and plateau-driven termination.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use nucseg_core::patching::{augment, sample_training_pair, AugmentSpec, PatchPair, PatchSource, SamplerConfig};
use nucseg_core::Volume;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_labels, batch_tensor};
use crate::error::{NnError, Result};
use crate::graph::{Graph, Tape};
use crate::loss::{combined_loss, combined_loss_value, LossConfig, LossParts};
use crate::network::{Model, ModelSpec};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::schedule::{PlateauConfig, PlateauEvent, PlateauScheduler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Patches drawn from each training subject per epoch.
    pub patches_per_subject: usize,
    pub sampler: SamplerConfig,
    pub augment: AugmentSpec,
    pub adam: AdamConfig,
    pub plateau: PlateauConfig,
    pub loss: LossConfig,
    /// Hard epoch cap; `None` runs until the learning-rate floor.
    pub max_epochs: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            patches_per_subject: 2,
            sampler: SamplerConfig::default(),
            augment: AugmentSpec::default(),
            adam: AdamConfig::default(),
            plateau: PlateauConfig::default(),
            loss: LossConfig::default(),
            max_epochs: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patches_per_subject == 0 {
            return Err(NnError::Config("batch_size and patches_per_subject must be positive".into()));
        }
        if self.max_epochs == Some(0) {
            return Err(NnError::Config("max_epochs must be positive".into()));
        }
        self.loss.validate()
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean main-output loss over the epoch's training batches.
    #[serde(rename = "L_p")]
    pub l_p: f64,
    /// Mean auxiliary loss; absent for single-branch models.
    #[serde(rename = "L_g")]
    pub l_g: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LrFloor,
    MaxEpochs,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation loss.
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
}

/// A training or validation volume pair on the padded network grid.
#[derive(Debug, Clone)]
pub struct LabeledVolume {
    pub image: Volume,
    pub label: Volume,
}

fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    for &p in parts {
        let mix: u64 = rng.random();
        rng = ChaCha8Rng::seed_from_u64(mix ^ p.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    rng.random()
}

fn epoch_pairs(
    subjects: &[LabeledVolume],
    rate: usize,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<PatchPair>> {
    let mut pairs = Vec::with_capacity(subjects.len() * cfg.patches_per_subject);
    for (i, s) in subjects.iter().enumerate() {
        let aug_seed = derive_seed(cfg.seed, &[epoch as u64, i as u64, 0]);
        let (image, label) = augment(&s.image, &s.label, &cfg.augment, aug_seed)?;
        let source = PatchSource::new(image, label, rate)?;
        for k in 0..cfg.patches_per_subject {
            let seed = derive_seed(cfg.seed, &[epoch as u64, i as u64, 1 + k as u64]);
            pairs.push(sample_training_pair(&source, &cfg.sampler, seed)?);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64, u64::MAX]));
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Deterministic validation pairs: a non-overlapping tiling of every subject,
/// so small structures anywhere in the volume contribute to the loss.
pub fn validation_pairs(subjects: &[LabeledVolume], rate: usize, patch: [usize; 3]) -> Result<Vec<PatchPair>> {
    subjects
        .iter()
        .map(|s| {
            let source = PatchSource::new(s.image.clone(), s.label.clone(), rate)?;
            source
                .tile_corners(patch)?
                .into_iter()
                .map(|c| Ok(source.pair_at(c, patch)?))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<Vec<_>>>>()
        .map(|v| v.into_iter().flatten().collect())
}

/// One optimization step on `batch`; returns the loss parts.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut Adam<f32>,
    batch: &[&PatchPair],
    loss: &LossConfig,
    lr: f64,
) -> Result<LossParts> {
    let uses_global = model.spec.uses_global();
    let local = batch_tensor::<f32>(&batch.iter().map(|p| &p.local).collect::<Vec<_>>())?;
    let labels = batch_labels(&batch.iter().map(|p| &p.local_label).collect::<Vec<_>>());
    let (global, global_labels) = if uses_global {
        (
            Some(batch_tensor::<f32>(&batch.iter().map(|p| &p.global).collect::<Vec<_>>())?),
            Some(batch_labels(&batch.iter().map(|p| &p.global_label).collect::<Vec<_>>())),
        )
    } else {
        (None, None)
    };
    let (grads, updates, parts) = {
        let mut tape = Tape::new(&model.params, true);
        let l = tape.input(local);
        let g = global.map(|t| tape.input(t));
        let out = model.arch.forward(&model.spec, &mut tape, &l, g.as_ref())?;
        let (root, parts) = combined_loss(&mut tape, &out, &labels, global_labels.as_deref(), loss)?;
        if !parts.total.is_finite() {
            return Err(NnError::NonFinite("training loss".into()));
        }
        (tape.backward(root), tape.take_bn_updates(), parts)
    };
    model.params.apply_bn_updates(&updates);
    adam.step(&mut model.params, &grads, lr);
    Ok(parts)
}

/// Mean evaluation-mode loss over `pairs`.
pub fn validation_loss(model: &Model<f32>, pairs: &[PatchPair], loss: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let local = batch_tensor::<f32>(&[&p.local])?;
        let global = if model.spec.uses_global() {
            Some(batch_tensor::<f32>(&[&p.global])?)
        } else {
            None
        };
        let out = model.predict(local, global)?;
        let gl = p.global_label.labels();
        let parts = combined_loss_value(
            &out,
            &p.local_label.labels(),
            model.spec.uses_global().then_some(gl.as_slice()),
            loss,
        )?;
        total += parts.total;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Trains a freshly initialized model on in-memory volumes. `on_epoch` sees
/// every log row as it is produced.
pub fn train_on(
    spec: ModelSpec,
    train: &[LabeledVolume],
    val: &[LabeledVolume],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model<f32>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(NnError::Config("training needs non-empty train and val splits".into()));
    }
    for s in train.iter().chain(val) {
        if s.image.channels() != spec.in_channels {
            return Err(NnError::ChannelMismatch {
                expected: spec.in_channels,
                found: s.image.channels(),
            });
        }
    }
    let mut model = Model::<f32>::build(spec, derive_seed(cfg.seed, &[u64::MAX - 1]))?;
    let mut adam = Adam::new(cfg.adam, &model.params);
    let mut sched = PlateauScheduler::new(cfg.plateau);
    let val_pairs = validation_pairs(val, spec.rate, cfg.sampler.patch)?;
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut log = Vec::new();
    let mut epoch = 0;
    let stop = loop {
        if sched.finished() {
            break StopReason::LrFloor;
        }
        if cfg.max_epochs.is_some_and(|m| epoch >= m) {
            break StopReason::MaxEpochs;
        }
        epoch += 1;
        let lr = sched.lr();
        let pairs = epoch_pairs(train, spec.rate, cfg, epoch)?;
        let (mut sum, mut sum_p, mut sum_g, mut n) = (0.0, 0.0, 0.0, 0usize);
        for chunk in pairs.chunks(cfg.batch_size) {
            let refs: Vec<&PatchPair> = chunk.iter().collect();
            let parts = train_step(&mut model, &mut adam, &refs, &cfg.loss, lr).map_err(|e| match e {
                NnError::NonFinite(_) => NnError::Diverged {
                    epoch,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            let w = chunk.len() as f64;
            sum += parts.total * w;
            sum_p += parts.main * w;
            sum_g += parts.aux.unwrap_or(0.0) * w;
            n += chunk.len();
        }
        let val_loss = validation_loss(&model, &val_pairs, &cfg.loss)?;
        if !val_loss.is_finite() {
            return Err(NnError::Diverged { epoch, loss: val_loss });
        }
        let row = EpochLog {
            epoch,
            train_loss: sum / n as f64,
            val_loss,
            l_p: sum_p / n as f64,
            l_g: spec.uses_global().then(|| sum_g / n as f64),
            lr,
        };
        info!(
            "epoch {epoch}: train {:.5} val {:.5} lr {:.3e}",
            row.train_loss, row.val_loss, row.lr
        );
        if best.as_ref().map_or(true, |b| val_loss < b.1) {
            best = Some((epoch, val_loss, model.params.clone()));
        }
        on_epoch(&row, &model);
        log.push(row);
        if sched.step(val_loss) == PlateauEvent::Reduced {
            info!("learning rate reduced to {:.3e}", sched.lr());
        }
    };
    let (best_epoch, best_val_loss, params) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        best: Model {
            spec,
            arch: model.arch,
            params,
        },
        best_epoch,
        best_val_loss,
        log,
        stop,
    })
}

/// Writes the metric log as CSV with columns
/// `epoch,train_loss,val_loss,L_p,L_g,lr`.
pub fn write_log_csv(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in log {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| NnError::io(path, e))
}

pub fn read_log_csv(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> NnError {
    NnError::Io {
        path: PathBuf::from(path),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Creates `dir` if needed.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| NnError::io(dir, e))
}
