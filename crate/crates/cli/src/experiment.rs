//! Phantom training experiments: one synthetic cohort, one training run per
//! configuration, Dice on training and held-out subjects.
//!
//! The desk-scale preset keeps the optimizer settings and the four-level
//! architecture but shrinks grid and patch so a run fits one CPU core. The
//! full-scale preset uses the default phantom grid with 64×128×128 patches.

use std::time::Instant;

use anyhow::Result;
use nucseg_core::metrics::dice_all;
use nucseg_core::patching::{PatchConfig, SamplerConfig};
use nucseg_core::phantom::{generate_subject, Jitter, PhantomSpec};
use nucseg_core::preprocess::{prepare_subject, Affine, PreparedSubject};
use nucseg_core::{InputMode, PreprocessConfig, Shape3};
use nucseg_nn::infer::predict_volume;
use nucseg_nn::train::{train_on, EpochLog, LabeledVolume, TrainConfig};
use nucseg_nn::{Family, Model, ModelSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub grid: Shape3,
    pub spacing: [f64; 3],
    pub patch: Shape3,
    pub stride_inplane: [usize; 2],
    /// In-plane jitter of foreground-centered training patches.
    pub jitter: usize,
    /// Base width of the dual-branch model.
    pub width: usize,
    pub epochs: usize,
    pub patches_per_subject: usize,
    pub train_subjects: usize,
    pub val_subjects: usize,
    pub heldout_subjects: usize,
}

impl Scale {
    /// Quarter of the default phantom plane at doubled in-plane spacing (same
    /// field of view), 40 slices. Jitter shrinks with the patch so
    /// foreground-centered patches keep their structure inside.
    pub fn desk() -> Self {
        Self {
            grid: [40, 84, 112],
            spacing: [2.0, 1.0268, 1.0268],
            patch: [16, 32, 32],
            stride_inplane: [16, 16],
            jitter: 8,
            width: 8,
            epochs: 40,
            patches_per_subject: 96,
            train_subjects: 4,
            val_subjects: 1,
            heldout_subjects: 2,
        }
    }

    /// Default phantom grid with 64×128×128 patches at the calibrated width.
    pub fn full() -> Self {
        let spec = PhantomSpec::default();
        Self {
            grid: spec.shape,
            spacing: spec.spacing,
            patch: [64, 128, 128],
            stride_inplane: [64, 64],
            jitter: 16,
            width: Family::DbResunet.default_width(),
            epochs: 40,
            patches_per_subject: 8,
            train_subjects: 4,
            val_subjects: 1,
            heldout_subjects: 2,
        }
    }

    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            size: self.patch,
            stride_inplane: self.stride_inplane,
        }
    }
}

/// Subjects of one experiment in acquisition order: train, val, held-out.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub scale: Scale,
    pub spec: PhantomSpec,
    pub seed: u64,
}

impl Cohort {
    pub fn new(scale: Scale, spec: PhantomSpec, seed: u64) -> Self {
        let spec = spec.with_grid(scale.grid, scale.spacing);
        Self { scale, spec, seed }
    }

    fn count(&self) -> usize {
        self.scale.train_subjects + self.scale.val_subjects + self.scale.heldout_subjects
    }

    /// Every subject prepared for `mode`.
    pub fn prepare(&self, mode: InputMode) -> Result<Vec<PreparedSubject>> {
        let pre = PreprocessConfig {
            target_shape: self.scale.grid,
            input_mode: mode,
            ..Default::default()
        };
        (0..self.count())
            .map(|i| {
                let p = generate_subject(&self.spec, &Jitter::default(), self.seed, i)?;
                Ok(prepare_subject(Some(&p.qsm), Some(&p.t1), Some(&p.label), &Affine::identity(), &pre)?)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub family: Family,
    pub rate: usize,
    pub mode: InputMode,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Per-subject Dice of classes 1..=7.
    pub train_dice: Vec<Vec<f64>>,
    pub heldout_dice: Vec<Vec<f64>>,
    pub seconds: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl RunResult {
    pub fn train_mean(&self) -> f64 {
        mean(self.train_dice.iter().flatten().copied())
    }

    pub fn heldout_mean(&self) -> f64 {
        mean(self.heldout_dice.iter().flatten().copied())
    }

    /// Held-out mean Dice over the foreground `classes` (1-based class ids).
    pub fn heldout_mean_over(&self, classes: &[usize]) -> f64 {
        mean(self.heldout_dice.iter().flat_map(|d| classes.iter().map(move |&c| d[c - 1])))
    }

    /// Held-out mean Dice per foreground class.
    pub fn heldout_per_class(&self) -> Vec<f64> {
        (0..7).map(|c| mean(self.heldout_dice.iter().map(|d| d[c]))).collect()
    }
}

fn foreground_dice(model: &Model<f32>, s: &PreparedSubject, patch: &PatchConfig) -> Result<Vec<f64>> {
    let r = predict_volume(model, s, patch, "experiment")?;
    let truth = s.label.as_ref().expect("phantom subjects carry labels");
    Ok(dice_all(&r.label, truth, 8)?[1..].to_vec())
}

/// Trains one dual-branch or single-branch model on the cohort and scores it.
pub fn run(
    cohort: &Cohort,
    subjects: &[PreparedSubject],
    family: Family,
    rate: usize,
    mode: InputMode,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<RunResult> {
    let start = Instant::now();
    let sc = &cohort.scale;
    let labeled = |s: &PreparedSubject| LabeledVolume {
        image: s.image.clone(),
        label: s.label.clone().expect("phantom subjects carry labels"),
    };
    let (train, rest) = subjects.split_at(sc.train_subjects);
    let (val, heldout) = rest.split_at(sc.val_subjects);
    let spec = ModelSpec::new(family, mode.channels()).with_width(sc.width).with_rate(rate);
    let cfg = TrainConfig {
        max_epochs: Some(sc.epochs),
        patches_per_subject: sc.patches_per_subject,
        sampler: SamplerConfig {
            patch: sc.patch,
            jitter: sc.jitter,
            ..Default::default()
        },
        seed: cohort.seed,
        ..Default::default()
    };
    let train_lv: Vec<_> = train.iter().map(labeled).collect();
    let val_lv: Vec<_> = val.iter().map(labeled).collect();
    let out = train_on(spec, &train_lv, &val_lv, &cfg, |row, _| on_epoch(row))?;
    let patch = sc.patch_config();
    let score = |set: &[PreparedSubject]| -> Result<Vec<Vec<f64>>> {
        set.iter().map(|s| foreground_dice(&out.best, s, &patch)).collect()
    };
    Ok(RunResult {
        family,
        rate,
        mode,
        best_epoch: out.best_epoch,
        train_dice: score(train)?,
        heldout_dice: score(heldout)?,
        log: out.log,
        seconds: start.elapsed().as_secs_f64(),
    })
}
