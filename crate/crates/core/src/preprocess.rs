//! Preprocessing chain: bring T1 onto the QSM grid, zero-pad, window the
//! intensities into `[0, 1]` and stack the network input channels.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, Shape3, Volume, VolumeKind};

/// Intensity window `[lo, hi]` mapped linearly onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f32,
    pub hi: f32,
}

impl Window {
    pub const QSM: Window = Window { lo: -150.0, hi: 250.0 };
    pub const T1: Window = Window { lo: 0.0, hi: 800.0 };
    pub const UNIT: Window = Window { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        let w = Window { lo, hi };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Config(format!(
                "window hi ({}) must exceed lo ({})",
                self.hi, self.lo
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        (v.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    #[default]
    QsmT1,
    QsmOnly,
    T1Only,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            InputMode::QsmT1 => 2,
            InputMode::QsmOnly | InputMode::T1Only => 1,
        }
    }

    pub fn needs_qsm(self) -> bool {
        matches!(self, InputMode::QsmT1 | InputMode::QsmOnly)
    }

    pub fn needs_t1(self) -> bool {
        matches!(self, InputMode::QsmT1 | InputMode::T1Only)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::QsmT1 => "qsm_t1",
            InputMode::QsmOnly => "qsm_only",
            InputMode::T1Only => "t1_only",
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qsm_t1" => Ok(InputMode::QsmT1),
            "qsm_only" => Ok(InputMode::QsmOnly),
            "t1_only" => Ok(InputMode::T1Only),
            other => Err(Error::Config(format!(
                "unknown input mode '{other}' (expected qsm_t1, qsm_only or t1_only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub qsm_window: Window,
    pub t1_window: Window,
    /// Zero-padded grid, `(z, y, x)`.
    pub target_shape: Shape3,
    pub input_mode: InputMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            qsm_window: Window::QSM,
            t1_window: Window::T1,
            target_shape: [64, 336, 448],
            input_mode: InputMode::QsmT1,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        self.qsm_window.validate()?;
        self.t1_window.validate()?;
        if self.target_shape.contains(&0) {
            return Err(Error::Config("target shape must be non-empty".into()));
        }
        Ok(())
    }
}

/// 4×4 homogeneous transform acting on physical `(x, y, z)` coordinates in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub [[f64; 4]; 4]);

impl Affine {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Affine(m)
    }

    pub fn from_row_major(v: [f64; 16]) -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row.copy_from_slice(&v[i * 4..i * 4 + 4]);
        }
        Affine(m)
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut v = [0.0; 16];
        for (i, row) in self.0.iter().enumerate() {
            v[i * 4..i * 4 + 4].copy_from_slice(row);
        }
        v
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut a = Self::identity();
        for (i, &ti) in t.iter().enumerate() {
            a.0[i][3] = ti;
        }
        a
    }

    /// Rotation by `radians` about the z axis (x-y plane).
    pub fn rotation_z(radians: f64) -> Self {
        let (s, c) = radians.sin_cos();
        let mut a = Self::identity();
        a.0[0][0] = c;
        a.0[0][1] = -s;
        a.0[1][0] = s;
        a.0[1][1] = c;
        a
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
        }
        out
    }

    pub fn compose(&self, other: &Affine) -> Affine {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Affine(m)
    }

    /// Gauss-Jordan inverse with partial pivoting.
    pub fn inverse(&self) -> Result<Affine> {
        let mut a = self.0;
        let mut inv = Affine::identity().0;
        let scale = a
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1.0);
        for col in 0..4 {
            let pivot = (col..4)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap_or(col);
            if a[pivot][col].abs() <= 1e-12 * scale {
                return Err(Error::SingularTransform);
            }
            a.swap(col, pivot);
            inv.swap(col, pivot);
            let p = a[col][col];
            for j in 0..4 {
                a[col][j] /= p;
                inv[col][j] /= p;
            }
            for row in 0..4 {
                if row != col {
                    let f = a[row][col];
                    if f != 0.0 {
                        for j in 0..4 {
                            a[row][j] -= f * a[col][j];
                            inv[row][j] -= f * inv[col][j];
                        }
                    }
                }
            }
        }
        Ok(Affine(inv))
    }
}

impl Default for Affine {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Tolerance, in voxels, for treating a sample just outside the grid as on it.
const EDGE_TOL: f64 = 1e-6;

/// Samples channel `c` of `v` at continuous voxel coordinate `p = (z, y, x)`;
/// `None` outside the grid.
pub(crate) fn sample(v: &Volume, c: usize, p: [f64; 3], interp: Interpolation) -> Option<f32> {
    let shape = v.shape();
    let mut q = p;
    for axis in 0..3 {
        let hi = (shape[axis] - 1) as f64;
        if q[axis] < -EDGE_TOL || q[axis] > hi + EDGE_TOL {
            return None;
        }
        q[axis] = q[axis].clamp(0.0, hi);
    }
    match interp {
        Interpolation::Nearest => {
            let z = q[0].round() as usize;
            let y = q[1].round() as usize;
            let x = q[2].round() as usize;
            Some(v.get(c, z, y, x))
        }
        Interpolation::Linear => {
            let mut idx = [[0usize; 2]; 3];
            let mut frac = [0.0f64; 3];
            for axis in 0..3 {
                let f = q[axis].floor();
                let i0 = f as usize;
                idx[axis] = [i0, (i0 + 1).min(shape[axis] - 1)];
                frac[axis] = q[axis] - f;
            }
            let mut acc = 0.0f64;
            for (dz, wz) in [(0, 1.0 - frac[0]), (1, frac[0])] {
                if wz == 0.0 {
                    continue;
                }
                for (dy, wy) in [(0, 1.0 - frac[1]), (1, frac[1])] {
                    if wy == 0.0 {
                        continue;
                    }
                    for (dx, wx) in [(0, 1.0 - frac[2]), (1, frac[2])] {
                        if wx == 0.0 {
                            continue;
                        }
                        let val = v.get(c, idx[0][dz], idx[1][dy], idx[2][dx]);
                        acc += wz * wy * wx * f64::from(val);
                    }
                }
            }
            Some(acc as f32)
        }
    }
}

/// Resamples `moving` onto `reference`. `affine` maps moving physical space to
/// reference physical space; each output voxel is pulled from the moving image
/// through its inverse. Samples outside the moving grid are 0.
pub fn resample_to_reference(
    moving: &Volume,
    reference: &Geometry,
    affine: &Affine,
    interpolation: Interpolation,
) -> Result<Volume> {
    if moving.channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "resampling expects a single-channel volume, got {} channels",
            moving.channels()
        )));
    }
    if moving.is_label() && interpolation != Interpolation::Nearest {
        return Err(Error::Config(
            "label volumes must be resampled with nearest interpolation".into(),
        ));
    }
    let inverse = affine.inverse()?;
    let mg = *moving.geometry();
    let [d, h, w] = reference.shape;
    let mut out = vec![0.0f32; reference.num_voxels()];
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let [pz, py, px] = reference.voxel_to_physical([z as f64, y as f64, x as f64]);
                let [mx, my, mz] = inverse.apply([px, py, pz]);
                let vox = mg.physical_to_voxel([mz, my, mx]);
                if let Some(val) = sample(moving, 0, vox, interpolation) {
                    out[i] = val;
                }
                i += 1;
            }
        }
    }
    Ok(Volume::from_parts_unchecked(
        *reference,
        1,
        moving.kind(),
        out,
    ))
}

/// Per-axis voxels added before the data when padding `source` to `target`.
/// The data is centered; an odd surplus puts the extra voxel on the high side.
pub fn pad_offsets(source: Shape3, target: Shape3) -> Result<Shape3> {
    let mut before = [0; 3];
    for axis in 0..3 {
        if target[axis] < source[axis] {
            return Err(Error::ShapeMismatch(format!(
                "target {target:?} is smaller than source {source:?}"
            )));
        }
        before[axis] = (target[axis] - source[axis]) / 2;
    }
    Ok(before)
}

/// Zero-pads `v` to `target`, centered. Label volumes are padded with
/// background; the origin moves so physical positions are preserved.
pub fn pad_to_shape(v: &Volume, target: Shape3) -> Result<Volume> {
    let src = v.shape();
    let before = pad_offsets(src, target)?;
    if src == target {
        return Ok(v.clone());
    }
    let g = v.geometry();
    let origin = g.voxel_to_physical([
        -(before[0] as f64),
        -(before[1] as f64),
        -(before[2] as f64),
    ]);
    let geometry = Geometry::new(target, g.spacing, origin)?;
    let mut data = vec![0.0f32; v.channels() * geometry.num_voxels()];
    for c in 0..v.channels() {
        let src_c = v.channel(c);
        let dst_c = &mut data[c * geometry.num_voxels()..(c + 1) * geometry.num_voxels()];
        for z in 0..src[0] {
            for y in 0..src[1] {
                let s = (z * src[1] + y) * src[2];
                let t = geometry.flat_index(z + before[0], y + before[1], before[2]);
                dst_c[t..t + src[2]].copy_from_slice(&src_c[s..s + src[2]]);
            }
        }
    }
    Ok(Volume::from_parts_unchecked(geometry, v.channels(), v.kind(), data))
}

/// Extracts the box `[offset, offset + shape)` of every channel.
pub fn crop(v: &Volume, offset: Shape3, shape: Shape3) -> Result<Volume> {
    let src = v.shape();
    for axis in 0..3 {
        if offset[axis] + shape[axis] > src[axis] || shape[axis] == 0 {
            return Err(Error::ShapeMismatch(format!(
                "crop {shape:?} at {offset:?} exceeds {src:?}"
            )));
        }
    }
    let g = v.geometry();
    let origin = g.voxel_to_physical([offset[0] as f64, offset[1] as f64, offset[2] as f64]);
    let geometry = Geometry::new(shape, g.spacing, origin)?;
    let mut data = Vec::with_capacity(v.channels() * geometry.num_voxels());
    for c in 0..v.channels() {
        let src_c = v.channel(c);
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                let s = g.flat_index(z + offset[0], y + offset[1], offset[2]);
                data.extend_from_slice(&src_c[s..s + shape[2]]);
            }
        }
    }
    Ok(Volume::from_parts_unchecked(geometry, v.channels(), v.kind(), data))
}

/// Inverse of [`pad_to_shape`]: crops `padded` back to `original` shape.
pub fn unpad(padded: &Volume, original: Shape3) -> Result<Volume> {
    let before = pad_offsets(original, padded.shape())?;
    crop(padded, before, original)
}

/// `(clamp(v, lo, hi) - lo) / (hi - lo)` voxelwise.
pub fn clip_rescale(v: &Volume, window: Window) -> Result<Volume> {
    if v.is_label() {
        return Err(Error::WrongKind {
            expected: "intensity",
        });
    }
    window.validate()?;
    v.with_data(v.data().iter().map(|&x| window.apply(x)).collect())
}

/// Builds the network input for `mode`; dual-channel order is QSM then T1.
pub fn stack_channels(qsm: Option<&Volume>, t1: Option<&Volume>, mode: InputMode) -> Result<Volume> {
    let pick = |v: Option<&Volume>, name: &str| -> Result<Volume> {
        let v = v.ok_or_else(|| Error::MissingInput(format!("{name} is required for {mode}")))?;
        if v.channels() != 1 || v.is_label() {
            return Err(Error::ShapeMismatch(format!(
                "{name} must be a single-channel intensity volume"
            )));
        }
        Ok(v.clone())
    };
    match mode {
        InputMode::QsmOnly => pick(qsm, "QSM"),
        InputMode::T1Only => pick(t1, "T1"),
        InputMode::QsmT1 => {
            let q = pick(qsm, "QSM")?;
            let t = pick(t1, "T1")?;
            if !q.geometry().approx_eq(t.geometry(), 1e-4) {
                return Err(Error::ShapeMismatch(format!(
                    "QSM grid {:?} and T1 grid {:?} differ",
                    q.shape(),
                    t.shape()
                )));
            }
            let geometry = *q.geometry();
            let mut data = q.into_data();
            data.extend_from_slice(t.data());
            Volume::intensity(geometry, 2, data)
        }
    }
}

/// Network-ready subject: padded, windowed, stacked input plus bookkeeping to
/// map predictions back onto the acquisition grid.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub image: Volume,
    pub label: Option<Volume>,
    /// Grid of the QSM before padding.
    pub original: Geometry,
}

/// Runs the full chain. `t1` is resampled onto the QSM grid through `affine`
/// (T1 physical → QSM physical) with linear interpolation when the mode uses it.
pub fn prepare_subject(
    qsm: Option<&Volume>,
    t1: Option<&Volume>,
    label: Option<&Volume>,
    affine: &Affine,
    cfg: &PreprocessConfig,
) -> Result<PreparedSubject> {
    cfg.validate()?;
    let reference = match (qsm, label) {
        (Some(q), _) => *q.geometry(),
        (None, Some(l)) => *l.geometry(),
        (None, None) => match t1 {
            Some(t) => *t.geometry(),
            None => return Err(Error::MissingInput("no image supplied".into())),
        },
    };
    let qsm_in = if cfg.input_mode.needs_qsm() {
        let q = qsm.ok_or_else(|| Error::MissingInput(format!("QSM is required for {}", cfg.input_mode)))?;
        Some(clip_rescale(&pad_to_shape(q, cfg.target_shape)?, cfg.qsm_window)?)
    } else {
        None
    };
    let t1_in = if cfg.input_mode.needs_t1() {
        let t = t1.ok_or_else(|| Error::MissingInput(format!("T1 is required for {}", cfg.input_mode)))?;
        let on_grid = if t.geometry().approx_eq(&reference, 1e-6) && *affine == Affine::identity() {
            t.clone()
        } else {
            resample_to_reference(t, &reference, affine, Interpolation::Linear)?
        };
        Some(clip_rescale(&pad_to_shape(&on_grid, cfg.target_shape)?, cfg.t1_window)?)
    } else {
        None
    };
    let image = stack_channels(qsm_in.as_ref(), t1_in.as_ref(), cfg.input_mode)?;
    let label = match label {
        Some(l) => {
            if l.shape() != reference.shape {
                return Err(Error::ShapeMismatch(format!(
                    "label grid {:?} differs from image grid {:?}",
                    l.shape(),
                    reference.shape
                )));
            }
            Some(pad_to_shape(l, cfg.target_shape)?)
        }
        None => None,
    };
    debug_assert_eq!(image.kind(), VolumeKind::Intensity);
    Ok(PreparedSubject {
        image,
        label,
        original: reference,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn ramp(shape: Shape3, spacing: [f64; 3]) -> Volume {
        let g = Geometry::new(shape, spacing, [0.0; 3]).unwrap();
        let data = (0..g.num_voxels()).map(|i| (i % 97) as f32 * 1.5 - 20.0).collect();
        Volume::intensity(g, 1, data).unwrap()
    }

    #[test]
    fn clip_rescale_examples() {
        let g = Geometry::with_shape([1, 1, 4]).unwrap();
        let q = Volume::intensity(g, 1, vec![-150.0, 250.0, 50.0, -400.0]).unwrap();
        let out = clip_rescale(&q, Window::QSM).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 0.5, 0.0]);
        let t = Volume::intensity(g, 1, vec![900.0, 0.0, 400.0, 800.0]).unwrap();
        assert_eq!(clip_rescale(&t, Window::T1).unwrap().data(), &[1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn clip_rescale_rejects_labels() {
        let g = Geometry::with_shape([1, 1, 2]).unwrap();
        let l = Volume::label(g, vec![0.0, 1.0], 8).unwrap();
        assert!(matches!(clip_rescale(&l, Window::QSM), Err(Error::WrongKind { .. })));
    }

    #[test]
    fn pad_swi_to_target() {
        let g = Geometry::new([56, 4, 5], [2.0, 0.5134, 0.5134], [10.0, 0.0, 0.0]).unwrap();
        let v = Volume::filled(g, 3.0);
        let p = pad_to_shape(&v, [64, 4, 5]).unwrap();
        assert_eq!(p.shape(), [64, 4, 5]);
        let plane = 4 * 5;
        assert!(p.data()[..4 * plane].iter().all(|&x| x == 0.0));
        assert!(p.data()[60 * plane..].iter().all(|&x| x == 0.0));
        assert!(p.data()[4 * plane..60 * plane].iter().all(|&x| x == 3.0));
        assert_eq!(p.geometry().origin[0], 10.0 - 4.0 * 2.0);
        assert_eq!(unpad(&p, [56, 4, 5]).unwrap(), v);
    }

    #[test]
    fn pad_odd_surplus_goes_high() {
        let g = Geometry::with_shape([1, 1, 2]).unwrap();
        let v = Volume::intensity(g, 1, vec![1.0, 2.0]).unwrap();
        let p = pad_to_shape(&v, [1, 1, 5]).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn pad_identity_and_errors() {
        let v = ramp([2, 3, 4], [1.0; 3]);
        assert_eq!(pad_to_shape(&v, [2, 3, 4]).unwrap(), v);
        assert!(pad_to_shape(&v, [1, 3, 4]).is_err());
    }

    #[test]
    fn pad_label_is_background() {
        let g = Geometry::with_shape([1, 2, 2]).unwrap();
        let l = Volume::label(g, vec![3.0, 3.0, 5.0, 7.0], 8).unwrap();
        let p = pad_to_shape(&l, [3, 4, 4]).unwrap();
        assert!(p.is_label());
        assert_eq!(p.data().iter().filter(|&&x| x != 0.0).count(), 4);
    }

    #[test]
    fn resample_identity() {
        let v = ramp([3, 5, 6], [2.0, 0.5, 0.5]);
        let out =
            resample_to_reference(&v, v.geometry(), &Affine::identity(), Interpolation::Linear).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_constant_has_zero_fringe() {
        let g = Geometry::new([4, 6, 6], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::filled(g, 7.0);
        // Shift by 2 mm along x: the first two output columns fall outside.
        let out = resample_to_reference(
            &v,
            &g,
            &Affine::translation([2.0, 0.0, 0.0]),
            Interpolation::Linear,
        )
        .unwrap();
        for z in 0..4 {
            for y in 0..6 {
                for x in 0..6 {
                    let expect = if x < 2 { 0.0 } else { 7.0 };
                    assert!((out.get(0, z, y, x) - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn resample_t1_grid_onto_swi_grid() {
        let t1 = Volume::filled(
            Geometry::new([176, 256, 256], [1.0; 3], [-30.0, -20.0, -20.0]).unwrap(),
            500.0,
        );
        let swi = Geometry::new([56, 336, 448], [2.0, 0.5134, 0.5134], [0.0; 3]).unwrap();
        let out = resample_to_reference(&t1, &swi, &Affine::identity(), Interpolation::Linear).unwrap();
        assert_eq!(out.shape(), [56, 336, 448]);
        assert!(out.geometry().approx_eq(&swi, 0.0));
        assert!((out.get(0, 20, 100, 100) - 500.0).abs() < 1e-3);
    }

    #[test]
    fn resample_errors() {
        let g = Geometry::with_shape([2, 2, 2]).unwrap();
        let l = Volume::label(g, vec![1.0; 8], 8).unwrap();
        assert!(resample_to_reference(&l, &g, &Affine::identity(), Interpolation::Linear).is_err());
        let v = Volume::filled(g, 1.0);
        let singular = Affine::from_row_major([0.0; 16]);
        assert!(matches!(
            resample_to_reference(&v, &g, &singular, Interpolation::Linear),
            Err(Error::SingularTransform)
        ));
    }

    #[test]
    fn stack_modes() {
        let g = Geometry::with_shape([1, 2, 2]).unwrap();
        let q = Volume::intensity(g, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let t = Volume::intensity(g, 1, vec![0.5, 0.6, 0.7, 0.8]).unwrap();
        let both = stack_channels(Some(&q), Some(&t), InputMode::QsmT1).unwrap();
        assert_eq!(both.channels(), 2);
        assert_eq!(both.channel(0), q.data());
        assert_eq!(both.channel(1), t.data());
        assert_eq!(stack_channels(Some(&q), None, InputMode::QsmOnly).unwrap(), q);
        assert_eq!(stack_channels(Some(&q), Some(&t), InputMode::T1Only).unwrap(), t);
        assert!(stack_channels(Some(&q), None, InputMode::QsmT1).is_err());
        let other = Volume::filled(Geometry::with_shape([1, 2, 3]).unwrap(), 0.0);
        assert!(stack_channels(Some(&q), Some(&other), InputMode::QsmT1).is_err());
    }

    #[test]
    fn affine_inverse_roundtrip() {
        let a = Affine::rotation_z(0.3).compose(&Affine::translation([1.0, -2.0, 3.0]));
        let inv = a.inverse().unwrap();
        let p = [4.0, 5.0, -6.0];
        let q = inv.apply(a.apply(p));
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn full_chain_on_swi_geometry() {
        let qg = Geometry::new([56, 336, 448], [2.0, 0.5134, 0.5134], [0.0; 3]).unwrap();
        let q = Volume::filled(qg, 400.0);
        let t1 = Volume::filled(Geometry::new([176, 256, 256], [1.0; 3], [0.0; 3]).unwrap(), 300.0);
        let cfg = PreprocessConfig::default();
        let s = prepare_subject(Some(&q), Some(&t1), None, &Affine::identity(), &cfg).unwrap();
        assert_eq!(s.image.channels(), 2);
        assert_eq!(s.image.shape(), [64, 336, 448]);
        assert!(s.image.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    proptest! {
        #[test]
        fn clip_rescale_idempotent_on_unit_window(vals in proptest::collection::vec(-500.0f32..500.0, 1..64)) {
            let g = Geometry::with_shape([1, 1, vals.len()]).unwrap();
            let v = Volume::intensity(g, 1, vals).unwrap();
            let once = clip_rescale(&v, Window::QSM).unwrap();
            prop_assert!(once.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            let twice = clip_rescale(&once, Window::UNIT).unwrap();
            prop_assert_eq!(once.data(), twice.data());
        }

        #[test]
        fn nearest_resampling_never_invents_labels(
            labels in proptest::collection::vec(prop_oneof![Just(0u8), Just(3u8), Just(6u8)], 27),
            angle in -0.6f64..0.6,
            shift in -2.0f64..2.0,
        ) {
            let g = Geometry::new([3, 3, 3], [1.0, 0.7, 0.7], [0.0; 3]).unwrap();
            let l = Volume::from_labels(g, &labels, 8).unwrap();
            let a = Affine::rotation_z(angle).compose(&Affine::translation([shift, 0.0, 0.0]));
            let out = resample_to_reference(&l, &g, &a, Interpolation::Nearest).unwrap();
            for v in out.labels() {
                prop_assert!(v == 0 || labels.contains(&v));
            }
        }
    }
}
