//! Patch extraction for the two-resolution networks.
//!
//! A training sample is a pair of equally sized patches: a *local* crop at
//! native resolution and a *global* crop, co-centered in-plane, taken from the
//! volume average-pooled by `rate` in `y` and `x`. The global crop therefore
//! sees `rate` times the in-plane field of view. `z` is never downsampled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{self, Interpolation};
use crate::volume::{Geometry, Shape3, Volume, VolumeKind};

/// Global-branch downsampling rates supported by the tooling.
pub const RATES: [usize; 3] = [1, 2, 4];

pub fn validate_rate(rate: usize) -> Result<()> {
    if RATES.contains(&rate) {
        Ok(())
    } else {
        Err(Error::Config(format!("rate must be one of 1, 2, 4 (got {rate})")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    /// Patch matrix `(z, y, x)`, shared by the local and global patches.
    pub size: Shape3,
    /// In-plane inference stride `(y, x)`.
    pub stride_inplane: [usize; 2],
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            size: [64, 128, 128],
            stride_inplane: [64, 64],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    pub enabled: bool,
    /// Flip probability along `(z, y, x)`.
    pub flip_prob: [f64; 3],
    /// Rotation about the slice axis is drawn from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_prob: [0.5; 3],
            max_rotation_deg: 30.0,
        }
    }
}

impl AugmentSpec {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// The concrete transform drawn for one augmentation call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flips: [bool; 3],
    pub angle_deg: f64,
}

impl AugmentDraw {
    pub fn draw(spec: &AugmentSpec, rng: &mut impl Rng) -> Self {
        let mut flips = [false; 3];
        for (f, &p) in flips.iter_mut().zip(spec.flip_prob.iter()) {
            *f = rng.random_bool(p.clamp(0.0, 1.0));
        }
        let angle_deg = if spec.max_rotation_deg > 0.0 {
            rng.random_range(-spec.max_rotation_deg..=spec.max_rotation_deg)
        } else {
            0.0
        };
        Self { flips, angle_deg }
    }
}

/// Applies one random flip/rotation draw identically to `image` and `label`.
/// Rotation is about the in-plane center; images are interpolated linearly,
/// labels with nearest neighbour.
pub fn augment(image: &Volume, label: &Volume, spec: &AugmentSpec, seed: u64) -> Result<(Volume, Volume)> {
    if image.shape() != label.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} and label {:?} differ",
            image.shape(),
            label.shape()
        )));
    }
    if !spec.enabled {
        return Ok((image.clone(), label.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = AugmentDraw::draw(spec, &mut rng);
    Ok(apply_augment(image, label, &draw))
}

pub fn apply_augment(image: &Volume, label: &Volume, draw: &AugmentDraw) -> (Volume, Volume) {
    let (mut img, mut lab) = if draw.angle_deg != 0.0 {
        (
            rotate_inplane(image, draw.angle_deg, Interpolation::Linear),
            rotate_inplane(label, draw.angle_deg, Interpolation::Nearest),
        )
    } else {
        (image.clone(), label.clone())
    };
    for (axis, &flip) in draw.flips.iter().enumerate() {
        if flip {
            img = flip_axis(&img, axis);
            lab = flip_axis(&lab, axis);
        }
    }
    (img, lab)
}

/// Exact reversal of `axis` (0 = z, 1 = y, 2 = x) for every channel.
pub fn flip_axis(v: &Volume, axis: usize) -> Volume {
    let [d, h, w] = v.shape();
    let g = *v.geometry();
    let mut out = Vec::with_capacity(v.data().len());
    for c in 0..v.channels() {
        let src = v.channel(c);
        for z in 0..d {
            let sz = if axis == 0 { d - 1 - z } else { z };
            for y in 0..h {
                let sy = if axis == 1 { h - 1 - y } else { y };
                let row = &src[g.flat_index(sz, sy, 0)..g.flat_index(sz, sy, 0) + w];
                if axis == 2 {
                    out.extend(row.iter().rev());
                } else {
                    out.extend_from_slice(row);
                }
            }
        }
    }
    Volume::from_parts_unchecked(g, v.channels(), v.kind(), out)
}

/// Rotates every slice about the in-plane center by `angle_deg`, in physical
/// coordinates. Image samples leaving the grid take the nearest edge value;
/// label samples leaving the grid become background.
pub fn rotate_inplane(v: &Volume, angle_deg: f64, interp: Interpolation) -> Volume {
    let [d, h, w] = v.shape();
    let g = *v.geometry();
    let (s, c) = angle_deg.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sy, sx) = (g.spacing[1], g.spacing[2]);
    // Source in-plane coordinate for every output (y, x).
    let mut src = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let py = (y as f64 - cy) * sy;
            let px = (x as f64 - cx) * sx;
            // Inverse rotation pulls the output voxel back into the input.
            let qx = c * px + s * py;
            let qy = -s * px + c * py;
            src.push((qy / sy + cy, qx / sx + cx));
        }
    }
    let is_label = v.is_label();
    let mut out = vec![0.0f32; v.data().len()];
    for ch in 0..v.channels() {
        for z in 0..d {
            for (i, &(qy, qx)) in src.iter().enumerate() {
                let inside = qy >= -0.5 && qy <= h as f64 - 0.5 && qx >= -0.5 && qx <= w as f64 - 0.5;
                if is_label && !inside {
                    continue;
                }
                let p = [
                    z as f64,
                    qy.clamp(0.0, (h - 1) as f64),
                    qx.clamp(0.0, (w - 1) as f64),
                ];
                let val = preprocess::sample(v, ch, p, interp).unwrap_or(0.0);
                out[ch * d * h * w + z * h * w + i] = val;
            }
        }
    }
    Volume::from_parts_unchecked(g, v.channels(), v.kind(), out)
}

/// In-plane `rate × rate` average pooling (images) or nearest-neighbour
/// decimation (labels). Partial border windows average the voxels they cover.
pub fn downsample_inplane(v: &Volume, rate: usize) -> Result<Volume> {
    if rate == 0 {
        return Err(Error::Config("rate must be positive".into()));
    }
    if rate == 1 {
        return Ok(v.clone());
    }
    let [d, h, w] = v.shape();
    let (oh, ow) = (h.div_ceil(rate), w.div_ceil(rate));
    let g = v.geometry();
    let spacing = [g.spacing[0], g.spacing[1] * rate as f64, g.spacing[2] * rate as f64];
    let half = (rate as f64 - 1.0) / 2.0;
    let origin = g.voxel_to_physical([0.0, half, half]);
    let geometry = Geometry::new([d, oh, ow], spacing, origin)?;
    let mut out = Vec::with_capacity(v.channels() * geometry.num_voxels());
    for c in 0..v.channels() {
        let src = v.channel(c);
        for z in 0..d {
            for oy in 0..oh {
                for ox in 0..ow {
                    if v.is_label() {
                        let y = (oy * rate + rate / 2).min(h - 1);
                        let x = (ox * rate + rate / 2).min(w - 1);
                        out.push(src[g.flat_index(z, y, x)]);
                    } else {
                        let mut sum = 0.0f64;
                        let mut n = 0usize;
                        for y in oy * rate..((oy + 1) * rate).min(h) {
                            let row = g.flat_index(z, y, 0);
                            for x in ox * rate..((ox + 1) * rate).min(w) {
                                sum += f64::from(src[row + x]);
                                n += 1;
                            }
                        }
                        out.push((sum / n as f64) as f32);
                    }
                }
            }
        }
    }
    Ok(Volume::from_parts_unchecked(geometry, v.channels(), v.kind(), out))
}

/// Copies the box starting at `corner` (may be negative or run past the end);
/// voxels outside `v` are 0, i.e. background for labels.
pub fn extract_patch(v: &Volume, corner: [isize; 3], size: Shape3) -> Volume {
    let shape = v.shape();
    let g = v.geometry();
    let n = size.iter().product::<usize>();
    let mut out = vec![0.0f32; v.channels() * n];
    for c in 0..v.channels() {
        let src = v.channel(c);
        for z in 0..size[0] {
            let sz = corner[0] + z as isize;
            if sz < 0 || sz >= shape[0] as isize {
                continue;
            }
            for y in 0..size[1] {
                let sy = corner[1] + y as isize;
                if sy < 0 || sy >= shape[1] as isize {
                    continue;
                }
                let x_lo = (-corner[2]).max(0) as usize;
                let x_hi = ((shape[2] as isize - corner[2]).min(size[2] as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                let s = g.flat_index(sz as usize, sy as usize, (corner[2] + x_lo as isize) as usize);
                let t = c * n + (z * size[1] + y) * size[2];
                out[t + x_lo..t + x_hi].copy_from_slice(&src[s..s + (x_hi - x_lo)]);
            }
        }
    }
    let origin = g.voxel_to_physical([corner[0] as f64, corner[1] as f64, corner[2] as f64]);
    let geometry = Geometry::new(size, g.spacing, origin).expect("patch geometry derives from a valid grid");
    Volume::from_parts_unchecked(geometry, v.channels(), v.kind(), out)
}

/// Corner on the rate-downsampled grid of the global patch co-centered with a
/// local patch at `local_corner`.
pub fn global_corner(local_corner: Shape3, size: Shape3, rate: usize) -> [isize; 3] {
    let mut corner = [local_corner[0] as isize, 0, 0];
    for axis in 1..3 {
        // Patch center in native voxel-edge coordinates, mapped onto the
        // coarse grid where voxel k spans [k*rate, (k+1)*rate).
        let center2 = 2 * local_corner[axis] + size[axis];
        let g2 = center2 as f64 / rate as f64 - size[axis] as f64;
        corner[axis] = (g2 / 2.0).round() as isize;
    }
    corner
}

#[derive(Debug, Clone)]
pub struct PatchPair {
    pub local: Volume,
    pub global: Volume,
    pub local_label: Volume,
    pub global_label: Volume,
    /// Local patch origin in voxels of the padded volume, `(z, y, x)`.
    pub local_corner: Shape3,
    pub rate: usize,
}

/// A volume prepared for patch extraction at one global rate.
#[derive(Debug, Clone)]
pub struct PatchSource {
    pub image: Volume,
    pub label: Volume,
    pub coarse_image: Volume,
    pub coarse_label: Volume,
    pub rate: usize,
    foreground: Vec<usize>,
}

impl PatchSource {
    pub fn new(image: Volume, label: Volume, rate: usize) -> Result<Self> {
        validate_rate(rate)?;
        if image.shape() != label.shape() || !label.is_label() {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} and label {:?} must share a grid",
                image.shape(),
                label.shape()
            )));
        }
        let coarse_image = downsample_inplane(&image, rate)?;
        let coarse_label = downsample_inplane(&label, rate)?;
        let foreground = label
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 0.0)
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            image,
            label,
            coarse_image,
            coarse_label,
            rate,
            foreground,
        })
    }

    pub fn has_foreground(&self) -> bool {
        !self.foreground.is_empty()
    }

    pub fn pair_at(&self, corner: Shape3, size: Shape3) -> Result<PatchPair> {
        let shape = self.image.shape();
        for axis in 0..3 {
            if corner[axis] + size[axis] > shape[axis] {
                return Err(Error::Sampling(format!(
                    "patch {size:?} at {corner:?} exceeds volume {shape:?}"
                )));
            }
        }
        let lc = [corner[0] as isize, corner[1] as isize, corner[2] as isize];
        let gc = global_corner(corner, size, self.rate);
        Ok(PatchPair {
            local: extract_patch(&self.image, lc, size),
            global: extract_patch(&self.coarse_image, gc, size),
            local_label: extract_patch(&self.label, lc, size),
            global_label: extract_patch(&self.coarse_label, gc, size),
            local_corner: corner,
            rate: self.rate,
        })
    }

    /// Corner of the patch centered in the volume, snapped to the rate grid.
    pub fn center_corner(&self, size: Shape3) -> Result<Shape3> {
        let shape = self.image.shape();
        check_fits(shape, size)?;
        let mut corner = [0; 3];
        for axis in 0..3 {
            corner[axis] = (shape[axis] - size[axis]) / 2;
        }
        Ok(snap(corner, self.rate))
    }

    /// Corners of a deterministic tiling with step equal to the patch size,
    /// the last window of each axis moved inward, snapped to the rate grid.
    pub fn tile_corners(&self, size: Shape3) -> Result<Vec<Shape3>> {
        let shape = self.image.shape();
        check_fits(shape, size)?;
        let axes: Vec<Vec<usize>> = (0..3).map(|a| axis_positions(shape[a], size[a], size[a])).collect();
        let mut corners = Vec::new();
        for &z in &axes[0] {
            for &y in &axes[1] {
                for &x in &axes[2] {
                    corners.push(snap([z, y, x], self.rate));
                }
            }
        }
        Ok(corners)
    }
}

fn check_fits(shape: Shape3, size: Shape3) -> Result<()> {
    if (0..3).any(|a| shape[a] < size[a]) {
        return Err(Error::Sampling(format!(
            "volume {shape:?} is smaller than patch {size:?}"
        )));
    }
    Ok(())
}

/// Rounds in-plane corner components down to multiples of `rate` so the
/// local patch edges fall on coarse-voxel boundaries.
fn snap(mut corner: Shape3, rate: usize) -> Shape3 {
    for c in corner.iter_mut().skip(1) {
        *c -= *c % rate;
    }
    corner
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub patch: Shape3,
    /// Probability of centering on a foreground voxel.
    pub fg_bias: f64,
    /// In-plane jitter (voxels) around a chosen foreground center.
    pub jitter: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            patch: [64, 128, 128],
            fg_bias: 0.5,
            jitter: 16,
        }
    }
}

/// Draws one training pair. With probability `fg_bias` the local patch is
/// centered on a random foreground voxel (plus jitter), otherwise the corner is
/// uniform over all valid corners.
pub fn sample_training_pair(source: &PatchSource, cfg: &SamplerConfig, seed: u64) -> Result<PatchPair> {
    let shape = source.image.shape();
    let size = cfg.patch;
    check_fits(shape, size)?;
    if cfg.fg_bias >= 1.0 && !source.has_foreground() {
        return Err(Error::Sampling(
            "foreground-only sampling requested but the label volume is empty".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let want_fg = rng.random_bool(cfg.fg_bias.clamp(0.0, 1.0));
    let mut corner = [0usize; 3];
    if want_fg && source.has_foreground() {
        let idx = source.foreground[rng.random_range(0..source.foreground.len())];
        let hw = shape[1] * shape[2];
        let center = [idx / hw, (idx % hw) / shape[2], idx % shape[2]];
        let j = cfg.jitter as i64;
        for axis in 0..3 {
            let jitter = if axis == 0 || j == 0 { 0 } else { rng.random_range(-j..=j) as isize };
            let c = center[axis] as isize + jitter - (size[axis] / 2) as isize;
            corner[axis] = c.clamp(0, (shape[axis] - size[axis]) as isize) as usize;
        }
    } else {
        for axis in 0..3 {
            corner[axis] = rng.random_range(0..=shape[axis] - size[axis]);
        }
    }
    source.pair_at(snap(corner, source.rate), size)
}

/// Patch start positions along one axis: multiples of `stride`, with the last
/// one moved inward (or an extra one appended) so the end is covered.
fn axis_positions(n: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = n - patch;
    let mut pos: Vec<usize> = (0..=last / stride).map(|k| k * stride).collect();
    let end = *pos.last().expect("at least one position");
    if end != last {
        let prev_end = if pos.len() >= 2 { pos[pos.len() - 2] + patch } else { 0 };
        if pos.len() >= 2 && prev_end >= last {
            *pos.last_mut().unwrap() = last;
        } else {
            pos.push(last);
        }
    }
    pos
}

/// Corners of the sliding-window tiling used at inference. In-plane the
/// windows step by `stride`; along `z` they step by the patch depth.
pub fn inference_grid(geometry: &Geometry, cfg: &PatchConfig) -> Result<Vec<Shape3>> {
    let shape = geometry.shape;
    check_fits(shape, cfg.size)?;
    if cfg.stride_inplane.contains(&0) {
        return Err(Error::Config("stride must be positive".into()));
    }
    let zs = axis_positions(shape[0], cfg.size[0], cfg.size[0]);
    let ys = axis_positions(shape[1], cfg.size[1], cfg.stride_inplane[0]);
    let xs = axis_positions(shape[2], cfg.size[2], cfg.stride_inplane[1]);
    let mut corners = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                corners.push([z, y, x]);
            }
        }
    }
    Ok(corners)
}

/// Averages overlapping class-probability patches into a full volume.
#[derive(Debug)]
pub struct Stitcher {
    geometry: Geometry,
    num_classes: usize,
    sum: Vec<f32>,
    count: Vec<u16>,
}

impl Stitcher {
    pub fn new(geometry: Geometry, num_classes: usize) -> Self {
        Self {
            geometry,
            num_classes,
            sum: vec![0.0; num_classes * geometry.num_voxels()],
            count: vec![0; geometry.num_voxels()],
        }
    }

    /// Adds a `(num_classes, size)` probability patch at `corner`.
    pub fn add(&mut self, corner: Shape3, size: Shape3, probs: &[f32]) -> Result<()> {
        let shape = self.geometry.shape;
        for axis in 0..3 {
            if corner[axis] + size[axis] > shape[axis] {
                return Err(Error::Stitch(format!(
                    "patch {size:?} at {corner:?} is outside {shape:?}"
                )));
            }
        }
        let pn = size.iter().product::<usize>();
        if probs.len() != self.num_classes * pn {
            return Err(Error::Stitch(format!(
                "patch holds {} values, expected {}",
                probs.len(),
                self.num_classes * pn
            )));
        }
        let vn = self.geometry.num_voxels();
        for z in 0..size[0] {
            for y in 0..size[1] {
                let dst = self.geometry.flat_index(corner[0] + z, corner[1] + y, corner[2]);
                let src = (z * size[1] + y) * size[2];
                for c in 0..self.num_classes {
                    let d = &mut self.sum[c * vn + dst..c * vn + dst + size[2]];
                    let s = &probs[c * pn + src..c * pn + src + size[2]];
                    for (a, b) in d.iter_mut().zip(s) {
                        *a += b;
                    }
                }
                for n in &mut self.count[dst..dst + size[2]] {
                    *n += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<Volume> {
        let vn = self.geometry.num_voxels();
        if let Some(i) = self.count.iter().position(|&n| n == 0) {
            return Err(Error::Stitch(format!("voxel {i} is not covered by any patch")));
        }
        let mut sum = self.sum;
        for c in 0..self.num_classes {
            for (v, &n) in sum[c * vn..(c + 1) * vn].iter_mut().zip(&self.count) {
                *v /= f32::from(n);
            }
        }
        Ok(Volume::from_parts_unchecked(
            self.geometry,
            self.num_classes,
            VolumeKind::Intensity,
            sum,
        ))
    }
}

/// Stitches `(corner, probability patch)` pairs over `geometry`.
pub fn stitch(patches: &[(Shape3, Volume)], geometry: &Geometry) -> Result<Volume> {
    let num_classes = patches
        .first()
        .map(|(_, p)| p.channels())
        .ok_or_else(|| Error::Stitch("no patches".into()))?;
    let mut stitcher = Stitcher::new(*geometry, num_classes);
    for (corner, p) in patches {
        if p.channels() != num_classes {
            return Err(Error::Stitch("patches disagree on class count".into()));
        }
        stitcher.add(*corner, p.shape(), p.data())?;
    }
    stitcher.finish()
}
