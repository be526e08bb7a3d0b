//! NIfTI-1 reading and writing (`.nii` and `.nii.gz`).

use std::path::Path;

use ndarray::{ArrayView3, ArrayView4, Axis};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};
use crate::volume::{ClassScheme, Geometry, Volume, VolumeKind};

const NIFTI_UNITS_MM: u8 = 2;
const NIFTI_XFORM_SCANNER_ANAT: i16 = 1;

fn nifti_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn header_geometry(header: &NiftiHeader, shape: [usize; 3], path: &Path) -> Result<Geometry> {
    let spacing = [
        f64::from(header.pixdim[3]),
        f64::from(header.pixdim[2]),
        f64::from(header.pixdim[1]),
    ];
    let origin = if header.qform_code > 0 {
        [
            f64::from(header.quatern_z),
            f64::from(header.quatern_y),
            f64::from(header.quatern_x),
        ]
    } else if header.sform_code > 0 {
        [
            f64::from(header.srow_z[3]),
            f64::from(header.srow_y[3]),
            f64::from(header.srow_x[3]),
        ]
    } else {
        [0.0; 3]
    };
    Geometry::new(shape, spacing, origin).map_err(|e| nifti_err(path, e))
}

/// Reads a volume of the requested kind. Label volumes are validated against
/// `scheme`.
pub fn load_volume(path: &Path, expected_kind: VolumeKind, scheme: &ClassScheme) -> Result<Volume> {
    match expected_kind {
        VolumeKind::Intensity => load_intensity(path),
        VolumeKind::Label => load_label(path, scheme.num_classes()),
    }
}

fn read_raw(path: &Path) -> Result<(Geometry, usize, Vec<f32>)> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| nifti_err(path, e))?;
    let header = obj.header().clone();
    let array = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| nifti_err(path, e))?;
    // File order is (x, y, z[, c]); flip to (c, z, y, x).
    let array = array.reversed_axes();
    let (channels, shape) = match array.ndim() {
        3 => (1, [array.shape()[0], array.shape()[1], array.shape()[2]]),
        4 => (
            array.shape()[0],
            [array.shape()[1], array.shape()[2], array.shape()[3]],
        ),
        n => {
            return Err(nifti_err(
                path,
                format!("expected a 3-D or 4-D image, found {n} dimensions"),
            ))
        }
    };
    let declared: Vec<usize> = header.dim[1..=header.dim[0] as usize]
        .iter()
        .map(|&d| d as usize)
        .collect();
    let mut found: Vec<usize> = array.shape().to_vec();
    found.reverse();
    if declared != found {
        return Err(Error::ShapeMismatch(format!(
            "{}: header declares {declared:?}, data is {found:?}",
            path.display()
        )));
    }
    let geometry = header_geometry(&header, shape, path)?;
    let data: Vec<f32> = array.as_standard_layout().iter().copied().collect();
    Ok((geometry, channels, data))
}

pub fn load_intensity(path: &Path) -> Result<Volume> {
    let (geometry, channels, data) = read_raw(path)?;
    Volume::intensity(geometry, channels, data)
}

pub fn load_label(path: &Path, num_classes: usize) -> Result<Volume> {
    let (geometry, channels, data) = read_raw(path)?;
    if channels != 1 {
        return Err(Error::ShapeMismatch(format!(
            "{}: label volumes must be single channel, found {channels}",
            path.display()
        )));
    }
    Volume::label(geometry, data, num_classes)
}

fn reference_header(geometry: &Geometry) -> NiftiHeader {
    let [sz, sy, sx] = geometry.spacing;
    let [oz, oy, ox] = geometry.origin;
    let mut header = NiftiHeader {
        xyzt_units: NIFTI_UNITS_MM,
        qform_code: NIFTI_XFORM_SCANNER_ANAT,
        sform_code: NIFTI_XFORM_SCANNER_ANAT,
        quatern_b: 0.0,
        quatern_c: 0.0,
        quatern_d: 0.0,
        quatern_x: ox as f32,
        quatern_y: oy as f32,
        quatern_z: oz as f32,
        srow_x: [sx as f32, 0.0, 0.0, ox as f32],
        srow_y: [0.0, sy as f32, 0.0, oy as f32],
        srow_z: [0.0, 0.0, sz as f32, oz as f32],
        ..NiftiHeader::default()
    };
    header.pixdim = [1.0, sx as f32, sy as f32, sz as f32, 1.0, 1.0, 1.0, 1.0];
    header
}

/// Writes `volume` to `path`; a `.gz` suffix selects compression. Label volumes
/// are stored as `uint8`, intensities as `float32`.
pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let header = reference_header(volume.geometry());
    let writer = WriterOptions::new(path).reference_header(&header);
    let [d, h, w] = volume.shape();
    let c = volume.channels();
    let result = match volume.kind() {
        VolumeKind::Label => {
            let labels = volume.labels();
            let view = ArrayView3::from_shape((d, h, w), &labels)
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            writer.write_nifti(&view.reversed_axes())
        }
        VolumeKind::Intensity if c == 1 => {
            let view = ArrayView3::from_shape((d, h, w), volume.data())
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            writer.write_nifti(&view.reversed_axes())
        }
        VolumeKind::Intensity => {
            let view = ArrayView4::from_shape((c, d, h, w), volume.data())
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            debug_assert_eq!(view.len_of(Axis(0)), c);
            writer.write_nifti(&view.reversed_axes())
        }
    };
    result.map_err(|e| nifti_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry() -> Geometry {
        Geometry::new([3, 4, 5], [2.0, 0.5134, 0.5134], [-10.5, 3.25, 7.0]).unwrap()
    }

    #[test]
    fn intensity_round_trip_gz_and_plain() {
        let dir = tempfile::tempdir().unwrap();
        let g = geometry();
        let data: Vec<f32> = (0..g.num_voxels()).map(|i| i as f32 * 0.37 - 11.0).collect();
        let v = Volume::intensity(g, 1, data).unwrap();
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            save_volume(&v, &p).unwrap();
            let back = load_intensity(&p).unwrap();
            assert_eq!(back.data(), v.data());
            assert!(back.geometry().approx_eq(v.geometry(), 1e-6));
            assert_eq!(back.get(0, 2, 3, 4), v.get(0, 2, 3, 4));
        }
    }

    #[test]
    fn multichannel_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = geometry();
        let data: Vec<f32> = (0..2 * g.num_voxels()).map(|i| i as f32).collect();
        let v = Volume::intensity(g, 2, data).unwrap();
        let p = dir.path().join("mc.nii.gz");
        save_volume(&v, &p).unwrap();
        let back = load_intensity(&p).unwrap();
        assert_eq!(back.channels(), 2);
        assert_eq!(back.data(), v.data());
    }

    #[test]
    fn label_round_trip_and_range_check() {
        let dir = tempfile::tempdir().unwrap();
        let g = geometry();
        let labels: Vec<u8> = (0..g.num_voxels()).map(|i| (i % 8) as u8).collect();
        let v = Volume::from_labels(g, &labels, 8).unwrap();
        let p = dir.path().join("lab.nii.gz");
        save_volume(&v, &p).unwrap();
        let back = load_label(&p, 8).unwrap();
        assert_eq!(back.labels(), labels);
        assert!(back.is_label());

        // An 8 is out of range for an 8-class scheme.
        let bad: Vec<u8> = (0..g.num_voxels()).map(|i| (i % 9) as u8).collect();
        let intensity = Volume::intensity(g, 1, bad.iter().map(|&b| f32::from(b)).collect()).unwrap();
        let p = dir.path().join("bad.nii.gz");
        save_volume(&intensity, &p).unwrap();
        let err = load_volume(&p, VolumeKind::Label, &ClassScheme::nuclei()).unwrap_err();
        assert!(matches!(err, Error::InvalidLabel { .. }), "{err}");
    }

    #[test]
    fn missing_file_is_an_error() {
        let err = load_intensity(Path::new("/nonexistent/x.nii")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn swi_grid_header_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([56, 336, 448], [2.0, 0.5134, 0.5134], [0.0; 3]).unwrap();
        let v = Volume::filled(g, 1.5);
        let p = dir.path().join("qsm.nii.gz");
        save_volume(&v, &p).unwrap();
        let back = load_intensity(&p).unwrap();
        assert_eq!(back.channels(), 1);
        assert_eq!(back.shape(), [56, 336, 448]);
        assert!((back.geometry().spacing[1] - 0.5134).abs() < 1e-6);
        assert_eq!(back.geometry().spacing[0], 2.0);
    }
}
