//! Volumes on a physical grid.
//!
//! Everything is stored in `(channel, z, y, x)` order with `x` fastest; `z` is
//! the slice axis. Geometry is axis aligned: orientation codes found in files
//! are not applied, so a voxel index maps to `origin + index * spacing`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts along `(z, y, x)`.
pub type Shape3 = [usize; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Voxel size in mm along `(z, y, x)`.
    pub spacing: [f64; 3],
    /// Physical position in mm of voxel `(0, 0, 0)`.
    pub origin: [f64; 3],
    pub shape: Shape3,
}

impl Geometry {
    pub fn new(shape: Shape3, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Geometry(format!("shape {shape:?} has an empty axis")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Geometry(format!(
                "spacing {spacing:?} must be positive and finite"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry(format!("origin {origin:?} is not finite")));
        }
        Ok(Self {
            spacing,
            origin,
            shape,
        })
    }

    /// Unit spacing, zero origin.
    pub fn with_shape(shape: Shape3) -> Result<Self> {
        Self::new(shape, [1.0; 3], [0.0; 3])
    }

    pub fn num_voxels(&self) -> usize {
        self.shape.iter().product()
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// `shape * spacing` per axis, in mm.
    pub fn physical_extent(&self) -> [f64; 3] {
        [
            self.shape[0] as f64 * self.spacing[0],
            self.shape[1] as f64 * self.spacing[1],
            self.shape[2] as f64 * self.spacing[2],
        ]
    }

    pub fn voxel_to_physical(&self, index: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + index[0] * self.spacing[0],
            self.origin[1] + index[1] * self.spacing[1],
            self.origin[2] + index[2] * self.spacing[2],
        ]
    }

    pub fn physical_to_voxel(&self, point: [f64; 3]) -> [f64; 3] {
        [
            (point[0] - self.origin[0]) / self.spacing[0],
            (point[1] - self.origin[1]) / self.spacing[1],
            (point[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Same shape and spacing within `tol` (mm), same origin within `tol`.
    pub fn approx_eq(&self, other: &Geometry, tol: f64) -> bool {
        self.shape == other.shape
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .chain(self.origin.iter().zip(other.origin.iter()))
                .all(|(a, b)| (a - b).abs() <= tol)
    }

    #[inline]
    pub fn flat_index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }
}

/// Product of the spacing components, in mm³.
pub fn voxel_volume(geometry: &Geometry) -> f64 {
    geometry.voxel_volume()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    Intensity,
    Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    channels: usize,
    kind: VolumeKind,
    data: Vec<f32>,
}

impl Volume {
    pub fn intensity(geometry: Geometry, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::ShapeMismatch("volume needs at least one channel".into()));
        }
        let expected = channels * geometry.num_voxels();
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "data has {} values, geometry {:?} x {channels} channels needs {expected}",
                data.len(),
                geometry.shape
            )));
        }
        Ok(Self {
            geometry,
            channels,
            kind: VolumeKind::Intensity,
            data,
        })
    }

    /// Builds a single-channel label volume, rejecting values that are not
    /// integers in `[0, num_classes)`.
    pub fn label(geometry: Geometry, data: Vec<f32>, num_classes: usize) -> Result<Self> {
        if data.len() != geometry.num_voxels() {
            return Err(Error::ShapeMismatch(format!(
                "label data has {} values, geometry {:?} needs {}",
                data.len(),
                geometry.shape,
                geometry.num_voxels()
            )));
        }
        validate_labels(&data, num_classes)?;
        Ok(Self {
            geometry,
            channels: 1,
            kind: VolumeKind::Label,
            data,
        })
    }

    pub fn from_labels(geometry: Geometry, labels: &[u8], num_classes: usize) -> Result<Self> {
        Self::label(
            geometry,
            labels.iter().map(|&l| f32::from(l)).collect(),
            num_classes,
        )
    }

    pub fn zeros(geometry: Geometry, channels: usize, kind: VolumeKind) -> Self {
        let channels = if kind == VolumeKind::Label { 1 } else { channels.max(1) };
        Self {
            geometry,
            channels,
            kind,
            data: vec![0.0; channels * geometry.num_voxels()],
        }
    }

    pub fn filled(geometry: Geometry, value: f32) -> Self {
        Self {
            geometry,
            channels: 1,
            kind: VolumeKind::Intensity,
            data: vec![value; geometry.num_voxels()],
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn shape(&self) -> Shape3 {
        self.geometry.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn is_label(&self) -> bool {
        self.kind == VolumeKind::Label
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Number of voxels in one channel.
    pub fn spatial_len(&self) -> usize {
        self.geometry.num_voxels()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.spatial_len() + self.geometry.flat_index(z, y, x)]
    }

    /// Single-channel copy of channel `c`.
    pub fn extract_channel(&self, c: usize) -> Volume {
        Volume {
            geometry: self.geometry,
            channels: 1,
            kind: self.kind,
            data: self.channel(c).to_vec(),
        }
    }

    /// Label values as bytes. Only meaningful for label volumes.
    pub fn labels(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v as u8).collect()
    }

    /// Same geometry and kind, new data of identical length.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Volume> {
        if data.len() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "replacement data has {} values, expected {}",
                data.len(),
                self.data.len()
            )));
        }
        Ok(Volume {
            data,
            ..self.clone()
        })
    }

    pub fn with_geometry(mut self, geometry: Geometry) -> Result<Volume> {
        if geometry.shape != self.geometry.shape {
            return Err(Error::ShapeMismatch(format!(
                "cannot relabel {:?} grid as {:?}",
                self.geometry.shape, geometry.shape
            )));
        }
        self.geometry = geometry;
        Ok(self)
    }

    pub(crate) fn from_parts_unchecked(
        geometry: Geometry,
        channels: usize,
        kind: VolumeKind,
        data: Vec<f32>,
    ) -> Volume {
        debug_assert_eq!(data.len(), channels * geometry.num_voxels());
        Volume {
            geometry,
            channels,
            kind,
            data,
        }
    }
}

pub(crate) fn validate_labels(data: &[f32], num_classes: usize) -> Result<()> {
    for (index, &value) in data.iter().enumerate() {
        if value.fract() != 0.0 || value < 0.0 || value >= num_classes as f32 {
            return Err(Error::InvalidLabel {
                value,
                index,
                num_classes,
            });
        }
    }
    Ok(())
}

/// Ordered label set and per-class loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassScheme {
    pub names: Vec<String>,
    pub weights: Vec<f64>,
}

impl ClassScheme {
    pub const BACKGROUND_WEIGHT: f64 = 0.1;
    pub const FOREGROUND_WEIGHT: f64 = 0.4;

    /// Background plus the seven gray-matter nuclei, bilateral nuclei merged.
    pub fn nuclei() -> Self {
        let names = ["background", "CN", "GP", "PUT", "THA", "SN", "RN", "DN"];
        let weights = names
            .iter()
            .enumerate()
            .map(|(i, _)| {
                if i == 0 {
                    Self::BACKGROUND_WEIGHT
                } else {
                    Self::FOREGROUND_WEIGHT
                }
            })
            .collect();
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            weights,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    /// Class indices excluding background.
    pub fn foreground(&self) -> std::ops::Range<usize> {
        1..self.num_classes()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() < 2 || self.names.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "class scheme needs >= 2 classes with one weight each (got {} names, {} weights)",
                self.names.len(),
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("class weights must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ClassScheme {
    fn default() -> Self {
        Self::nuclei()
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    fn swi() -> Geometry {
        Geometry::new([56, 336, 448], [2.0, 0.5134, 0.5134], [0.0; 3]).unwrap()
    }

    #[test]
    fn voxel_volume_examples() {
        assert_abs_diff_eq!(voxel_volume(&swi()), 0.527159, epsilon = 1e-6);
        let unit = Geometry::with_shape([2, 2, 2]).unwrap();
        assert_eq!(voxel_volume(&unit), 1.0);
        let g = Geometry::new([1, 1, 1], [2.0, 0.5, 0.5], [0.0; 3]).unwrap();
        assert_eq!(voxel_volume(&g), 0.5);
    }

    #[test]
    fn physical_extent_of_swi_grid() {
        let e = swi().physical_extent();
        assert_abs_diff_eq!(e[0], 112.0, epsilon = 1e-9);
        assert_abs_diff_eq!(e[1], 172.5024, epsilon = 1e-9);
        assert_abs_diff_eq!(e[2], 230.0032, epsilon = 1e-9);
    }

    #[test]
    fn geometry_rejects_bad_values() {
        assert!(Geometry::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, -1.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn label_volume_rejects_out_of_range_and_fractional() {
        let g = Geometry::with_shape([1, 1, 3]).unwrap();
        assert!(Volume::label(g, vec![0.0, 7.0, 1.0], 8).is_ok());
        let err = Volume::label(g, vec![0.0, 8.0, 1.0], 8).unwrap_err();
        assert!(matches!(err, Error::InvalidLabel { index: 1, .. }));
        assert!(Volume::label(g, vec![0.0, 0.5, 1.0], 8).is_err());
        assert!(Volume::label(g, vec![-1.0, 0.0, 1.0], 8).is_err());
    }

    #[test]
    fn intensity_volume_checks_length() {
        let g = Geometry::with_shape([2, 2, 2]).unwrap();
        assert!(Volume::intensity(g, 2, vec![0.0; 16]).is_ok());
        assert!(Volume::intensity(g, 2, vec![0.0; 8]).is_err());
        assert!(Volume::intensity(g, 0, vec![]).is_err());
    }

    #[test]
    fn nuclei_scheme_weights() {
        let s = ClassScheme::nuclei();
        assert_eq!(s.num_classes(), 8);
        assert_eq!(s.weights[0], 0.1);
        assert!(s.weights[1..].iter().all(|&w| w == 0.4));
        assert_eq!(s.name(4), "THA");
        s.validate().unwrap();
    }
}
