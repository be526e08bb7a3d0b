//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `NUCSEGCK`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f32` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nucseg_core::patching::PatchConfig;
use nucseg_core::{ClassScheme, PreprocessConfig};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::network::{Model, ModelSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NUCSEGCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 5],
    pub learnable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: ModelSpec,
    pub scheme: ClassScheme,
    pub preprocess: PreprocessConfig,
    pub patch: PatchConfig,
    /// Free-form training metadata (epoch, losses, seed).
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

/// Everything needed to reproduce inference.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub scheme: ClassScheme,
    pub preprocess: PreprocessConfig,
    pub patch: PatchConfig,
    pub metadata: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            spec: self.model.spec,
            scheme: self.scheme.clone(),
            preprocess: self.preprocess.clone(),
            patch: self.patch,
            metadata: self.metadata.clone(),
            tensors: self
                .model
                .params
                .entries()
                .iter()
                .map(|e| TensorRecord {
                    name: e.name.clone(),
                    shape: e.value.shape(),
                    learnable: e.learnable,
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header()).map_err(|e| NnError::Checkpoint {
            path: Default::default(),
            message: e.to_string(),
        })?;
        let data_len: usize = self.model.params.entries().iter().map(|e| e.value.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + header.len() + data_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in self.model.params.entries() {
            for v in e.value.data() {
                out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| NnError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| NnError::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| NnError::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(format!("invalid header: {e}")))?;
        let mut model = Model::<T>::build(header.spec, 0)?;
        if model.params.len() != header.tensors.len() {
            return Err(bad(format!(
                "header lists {} tensors, the architecture has {}",
                header.tensors.len(),
                model.params.len()
            )));
        }
        let mut offset = 16 + hlen;
        for (entry, rec) in model.params.entries_mut().iter_mut().zip(&header.tensors) {
            if entry.name != rec.name || entry.value.shape() != rec.shape {
                return Err(bad(format!(
                    "tensor {} {:?} does not match architecture tensor {} {:?}",
                    rec.name,
                    rec.shape,
                    entry.name,
                    entry.value.shape()
                )));
            }
            let n = entry.value.len();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| bad(format!("truncated data for {}", rec.name)))?;
            for (dst, chunk) in entry.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = T::of(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
            }
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self {
            model,
            scheme: header.scheme,
            preprocess: header.preprocess,
            patch: header.patch,
            metadata: header.metadata,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| NnError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Parameter tensors as a flat `Vec` for comparisons.
pub fn flatten_params<T: Scalar>(model: &Model<T>) -> Vec<Tensor<T>> {
    model.params.entries().iter().map(|e| e.value.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Family;

    fn sample() -> Checkpoint<f32> {
        Checkpoint {
            model: Model::build(ModelSpec::new(Family::DbResunet, 2).with_width(2).with_levels(2), 3).unwrap(),
            scheme: ClassScheme::nuclei(),
            preprocess: PreprocessConfig::default(),
            patch: PatchConfig::default(),
            metadata: serde_json::json!({"epoch": 4}),
        }
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(back.header(), ck.header());
        assert_eq!(flatten_params(&back.model), flatten_params(&ck.model));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let p = Path::new("x");
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad, p).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&extra, p).is_err());
    }
}
