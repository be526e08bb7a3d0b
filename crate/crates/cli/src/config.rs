//! Run configuration: every hyperparameter of a run in one YAML document.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nucseg_core::patching::PatchConfig;
use nucseg_core::phantom::{Jitter, PhantomSpec};
use nucseg_core::{ClassScheme, InputMode, PreprocessConfig};
use nucseg_nn::network::{DEFAULT_LEVELS, DEFAULT_RATE};
use nucseg_nn::train::TrainConfig;
use nucseg_nn::{Family, ModelSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub family: Family,
    /// Channels of the first level; `None` selects the family default.
    pub base_width: Option<usize>,
    pub levels: usize,
    /// Global-branch in-plane downsampling rate.
    pub rate: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::DbResunet,
            base_width: None,
            levels: DEFAULT_LEVELS,
            rate: DEFAULT_RATE,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_mode: InputMode) -> ModelSpec {
        let mut spec = ModelSpec::new(self.family, input_mode.channels())
            .with_levels(self.levels)
            .with_rate(self.rate);
        if let Some(w) = self.base_width {
            spec = spec.with_width(w);
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub spec: PhantomSpec,
    pub jitter: Jitter,
    pub subjects: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            spec: PhantomSpec::default(),
            jitter: Jitter::default(),
            subjects: 6,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Dataset manifest.
    pub manifest: Option<PathBuf>,
    /// Output directory.
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub device: String,
    pub preprocess: PreprocessConfig,
    pub scheme: ClassScheme,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Sliding-window tiling used at inference.
    pub patch: PatchConfig,
    pub phantom: PhantomConfig,
    pub paths: Paths,
    pub overlays: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            device: "cpu".into(),
            preprocess: PreprocessConfig::default(),
            scheme: ClassScheme::nuclei(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            patch: PatchConfig::default(),
            phantom: PhantomConfig::default(),
            paths: Paths::default(),
            overlays: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_yaml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("run config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_yaml()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn model_spec(&self) -> ModelSpec {
        self.model.spec(self.preprocess.input_mode)
    }

    /// Cross-field checks; the seed is propagated into the trainer.
    pub fn resolve(mut self) -> Result<Self> {
        if self.device != "cpu" {
            bail!("unsupported device {:?}: this build runs on the cpu only", self.device);
        }
        self.train.seed = self.seed;
        self.train.loss.weights = self.scheme.weights.clone();
        self.scheme.validate()?;
        self.preprocess.validate()?;
        self.model_spec().validate()?;
        self.train.validate()?;
        Ok(self)
    }
}
