//! Volumes, NIfTI I/O, preprocessing, patch sampling, phantoms and metrics
//! for gray-matter nucleus segmentation.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod patching;
pub mod phantom;
pub mod preprocess;
pub mod volume;

pub use error::{Error, Result};
pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use preprocess::{InputMode, PreprocessConfig};
pub use volume::{ClassScheme, Geometry, Shape3, Volume, VolumeKind};
