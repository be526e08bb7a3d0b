//! JSON dataset manifests: per-subject file paths and the train/val/test split.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::Affine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub qsm: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1: Option<PathBuf>,
    pub label: PathBuf,
    pub split: Split,
    /// Per-subject T1 → QSM transform, overriding the manifest default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine: Option<[f64; 16]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(rename = "subjects")]
    pub entries: Vec<ManifestEntry>,
    /// Rigid transform from the T1 grid to the QSM grid, 16 numbers row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine: Option<[f64; 16]>,
    /// Directory relative paths are resolved against; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self {
            entries,
            affine: None,
            root: PathBuf::new(),
        }
    }

    /// Parses the manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        manifest.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Manifest(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for entry in &self.entries {
            if !seen.insert(entry.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate subject id '{}'", entry.id)));
            }
            let files = [Some(&entry.qsm), entry.t1.as_ref(), Some(&entry.label)];
            for file in files.into_iter().flatten() {
                let full = self.resolve(file);
                if !full.exists() {
                    return Err(Error::Manifest(format!(
                        "subject '{}': missing file {}",
                        entry.id,
                        full.display()
                    )));
                }
            }
            if let Some(a) = entry.affine {
                Affine::from_row_major(a).inverse()?;
            }
        }
        if let Some(a) = self.affine {
            Affine::from_row_major(a).inverse()?;
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn counts(&self) -> SplitCounts {
        let mut counts = SplitCounts::default();
        for e in &self.entries {
            match e.split {
                Split::Train => counts.train += 1,
                Split::Val => counts.val += 1,
                Split::Test => counts.test += 1,
            }
        }
        counts
    }

    /// Transform for `entry`: its own, else the manifest default, else identity.
    pub fn affine_for(&self, entry: &ManifestEntry) -> Affine {
        entry
            .affine
            .or(self.affine)
            .map(Affine::from_row_major)
            .unwrap_or_else(Affine::identity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_resolve_and_count() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["a_qsm.nii", "a_lab.nii", "b_qsm.nii", "b_t1.nii", "b_lab.nii"] {
            std::fs::write(dir.path().join(f), b"x").unwrap();
        }
        let json = r#"{
            "subjects": [
                {"id": "a", "qsm": "a_qsm.nii", "label": "a_lab.nii", "split": "train"},
                {"id": "b", "qsm": "b_qsm.nii", "t1": "b_t1.nii", "label": "b_lab.nii", "split": "test",
                 "affine": [1,0,0,2, 0,1,0,0, 0,0,1,0, 0,0,0,1]}
            ]
        }"#;
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, json).unwrap();
        let m = DatasetManifest::load(&path).unwrap();
        assert_eq!(
            m.counts(),
            SplitCounts {
                train: 1,
                val: 0,
                test: 1
            }
        );
        let b = m.split(Split::Test).next().unwrap();
        assert_eq!(m.resolve(&b.qsm), dir.path().join("b_qsm.nii"));
        assert_eq!(m.affine_for(b).apply([0.0, 0.0, 0.0]), [2.0, 0.0, 0.0]);
        let a = m.split(Split::Train).next().unwrap();
        assert_eq!(m.affine_for(a), Affine::identity());
    }

    #[test]
    fn missing_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let json = r#"{"subjects": [{"id": "a", "qsm": "nope.nii", "label": "nope.nii", "split": "val"}]}"#;
        let path = dir.path().join("m.json");
        std::fs::write(&path, json).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(Error::Manifest(_))));
    }

    #[test]
    fn singular_affine_rejected() {
        let m = DatasetManifest {
            affine: Some([0.0; 16]),
            ..DatasetManifest::new(vec![])
        };
        assert!(m.validate().is_err());
    }
}
