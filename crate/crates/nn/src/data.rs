//! Subjects loaded from a dataset manifest and prepared for the network.

use nucseg_core::io::{load_intensity, load_label};
use nucseg_core::preprocess::{prepare_subject, Affine, PreparedSubject};
use nucseg_core::{ClassScheme, DatasetManifest, ManifestEntry, PreprocessConfig, Split, Volume};

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub prepared: PreparedSubject,
    /// Unclipped QSM on the acquisition grid, for ROI measurements.
    pub qsm: Volume,
    /// T1 as loaded, when the input mode uses it.
    pub t1: Option<Volume>,
    /// T1 physical to QSM physical transform.
    pub affine: Affine,
    /// Ground truth on the acquisition grid.
    pub label: Option<Volume>,
}

pub fn load_subject(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    cfg: &PreprocessConfig,
    scheme: &ClassScheme,
) -> Result<Subject> {
    let qsm = load_intensity(&manifest.resolve(&entry.qsm))?;
    let t1 = match (&entry.t1, cfg.input_mode.needs_t1()) {
        (Some(p), true) => Some(load_intensity(&manifest.resolve(p))?),
        _ => None,
    };
    let label = load_label(&manifest.resolve(&entry.label), scheme.num_classes())?;
    let affine = manifest.affine_for(entry);
    let prepared = prepare_subject(Some(&qsm), t1.as_ref(), Some(&label), &affine, cfg)?;
    Ok(Subject {
        id: entry.id.clone(),
        prepared,
        qsm,
        t1,
        affine,
        label: Some(label),
    })
}

pub fn load_split(
    manifest: &DatasetManifest,
    split: Split,
    cfg: &PreprocessConfig,
    scheme: &ClassScheme,
) -> Result<Vec<Subject>> {
    manifest.split(split).map(|e| load_subject(manifest, e, cfg, scheme)).collect()
}

/// Stacks equally shaped volumes into a `[N, C, D, H, W]` tensor.
pub fn batch_tensor<T: Scalar>(volumes: &[&Volume]) -> Result<Tensor<T>> {
    let first = volumes
        .first()
        .ok_or_else(|| NnError::Shape("cannot batch zero volumes".into()))?;
    let [d, h, w] = first.shape();
    let c = first.channels();
    let mut data = Vec::with_capacity(volumes.len() * first.data().len());
    for v in volumes {
        if v.shape() != first.shape() || v.channels() != c {
            return Err(NnError::Shape("batched volumes must share shape and channels".into()));
        }
        data.extend(v.data().iter().map(|&x| T::of(f64::from(x))));
    }
    Ok(Tensor::from_vec([volumes.len(), c, d, h, w], data))
}

/// Concatenated class indices of label volumes.
pub fn batch_labels(volumes: &[&Volume]) -> Vec<u8> {
    volumes.iter().flat_map(|v| v.labels()).collect()
}
