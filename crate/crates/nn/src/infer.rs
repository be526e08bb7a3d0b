//! Sliding-window inference over full volumes and the timing harness.

use std::time::Instant;

use nucseg_core::metrics::{argmax, mean_std};
use nucseg_core::patching::{downsample_inplane, extract_patch, global_corner, inference_grid, PatchConfig, Stitcher};
use nucseg_core::preprocess::{prepare_subject, unpad, PreparedSubject};
use nucseg_core::PreprocessConfig;
use nucseg_core::Volume;
use serde::{Deserialize, Serialize};

use crate::data::{batch_tensor, Subject};
use crate::error::{NnError, Result};
use crate::network::Model;
use crate::ops::softmax_forward;

#[derive(Debug, Clone)]
pub struct SegmentationResult {
    /// Per-voxel argmax of `probabilities` on the acquisition grid.
    pub label: Volume,
    pub probabilities: Volume,
    pub checkpoint_id: String,
    /// Wall-clock seconds from network input to label map.
    pub seconds: f64,
}

/// Stitched class probabilities over the grid of `image`.
pub fn predict_probabilities(model: &Model<f32>, image: &Volume, patch: &PatchConfig) -> Result<Volume> {
    let spec = &model.spec;
    if image.channels() != spec.in_channels {
        return Err(NnError::ChannelMismatch {
            expected: spec.in_channels,
            found: image.channels(),
        });
    }
    let geometry = *image.geometry();
    let corners = inference_grid(&geometry, patch)?;
    let coarse = if spec.uses_global() {
        Some(downsample_inplane(image, spec.rate)?)
    } else {
        None
    };
    let mut stitcher = Stitcher::new(geometry, spec.num_classes);
    for corner in corners {
        let lc = [corner[0] as isize, corner[1] as isize, corner[2] as isize];
        let local = batch_tensor::<f32>(&[&extract_patch(image, lc, patch.size)])?;
        let global = match &coarse {
            Some(c) => Some(batch_tensor::<f32>(&[&extract_patch(
                c,
                global_corner(corner, patch.size, spec.rate),
                patch.size,
            )])?),
            None => None,
        };
        let out = model.predict(local, global)?;
        let probs = softmax_forward(&out.main);
        stitcher.add(corner, patch.size, probs.data())?;
    }
    Ok(stitcher.finish()?)
}

/// Full-volume segmentation of a prepared subject, reported on its
/// acquisition grid.
pub fn predict_volume(
    model: &Model<f32>,
    subject: &PreparedSubject,
    patch: &PatchConfig,
    checkpoint_id: &str,
) -> Result<SegmentationResult> {
    let start = Instant::now();
    let padded = predict_probabilities(model, &subject.image, patch)?;
    let probabilities = unpad(&padded, subject.original.shape)?.with_geometry(subject.original)?;
    let label = argmax(&probabilities);
    Ok(SegmentationResult {
        label,
        probabilities,
        checkpoint_id: checkpoint_id.to_string(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_s: f64,
    pub std_s: f64,
    pub runs: usize,
    pub device: String,
}

impl std::fmt::Display for Timing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}±{:.3} s ({}, n={})", self.mean_s, self.std_s, self.device, self.runs)
    }
}

/// Per-volume wall-clock statistics from loaded volumes through
/// preprocessing, tiling, stitching and argmax. One untimed warm-up run
/// precedes the measurements.
pub fn time_inference(
    model: &Model<f32>,
    subjects: &[&Subject],
    preprocess: &PreprocessConfig,
    patch: &PatchConfig,
    repetitions: usize,
) -> Result<Timing> {
    let run = |s: &Subject| -> Result<f64> {
        let start = Instant::now();
        let prepared = prepare_subject(Some(&s.qsm), s.t1.as_ref(), None, &s.affine, preprocess)?;
        predict_volume(model, &prepared, patch, "")?;
        Ok(start.elapsed().as_secs_f64())
    };
    let first = subjects
        .first()
        .ok_or_else(|| NnError::Config("timing needs at least one volume".into()))?;
    run(first)?;
    let mut samples = Vec::with_capacity(subjects.len() * repetitions.max(1));
    for _ in 0..repetitions.max(1) {
        for s in subjects {
            samples.push(run(s)?);
        }
    }
    let (mean_s, std_s) = mean_std(&samples);
    Ok(Timing {
        mean_s,
        std_s,
        runs: samples.len(),
        device: "cpu".into(),
    })
}
