//! Synthetic dual-contrast head phantoms with bilateral ellipsoidal nuclei.
//!
//! Coordinates are millimetres relative to the grid center, ordered
//! `(z, y, x)`. Every nucleus is mirrored across `x = 0`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::save_volume;
use crate::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::volume::{Geometry, Shape3, Volume, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intensity {
    pub mean: f32,
    pub std: f32,
}

impl Intensity {
    pub const fn new(mean: f32, std: f32) -> Self {
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NucleusSpec {
    pub name: String,
    /// Right-hemisphere center; the left copy negates `x`.
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
    pub qsm: Intensity,
    pub t1: Intensity,
    pub small: bool,
}

/// One placed ellipsoid of class `class` (1-based label value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub class: usize,
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let r: f64 = (0..3)
            .map(|a| ((p[a] - self.center_mm[a]) / self.semi_axes_mm[a]).powi(2))
            .sum();
        r <= 1.0
    }

    pub fn analytic_volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.semi_axes_mm.iter().product::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub shape: Shape3,
    pub spacing: [f64; 3],
    /// Classes in label order; `classes[i]` has label `i + 1`.
    pub classes: Vec<NucleusSpec>,
    pub background_qsm: Intensity,
    pub background_t1: Intensity,
    /// Tissue outside this ellipsoid is air: 0 in both channels, noise free.
    pub brain_semi_axes_mm: [f64; 3],
    pub seed: u64,
}

fn nucleus(name: &str, c: [f64; 3], s: [f64; 3], qsm: Intensity, t1: Intensity, small: bool) -> NucleusSpec {
    NucleusSpec {
        name: name.to_string(),
        center_mm: c,
        semi_axes_mm: s,
        qsm,
        t1,
        small,
    }
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let i = Intensity::new;
        Self {
            shape: [64, 168, 224],
            spacing: [2.0, 0.5134, 0.5134],
            classes: vec![
                nucleus("CN", [10.0, 16.0, 12.0], [9.0, 10.0, 4.5], i(60.0, 18.0), i(360.0, 20.0), false),
                nucleus("GP", [0.0, 0.0, 18.0], [6.0, 9.0, 3.5], i(180.0, 18.0), i(450.0, 20.0), false),
                nucleus("PUT", [2.0, 3.0, 27.0], [10.0, 14.0, 4.5], i(80.0, 18.0), i(420.0, 20.0), false),
                nucleus("THA", [4.0, -18.0, 10.0], [8.0, 12.0, 7.0], i(25.0, 18.0), i(400.0, 20.0), false),
                nucleus("SN", [-12.0, -12.0, 9.0], [3.0, 4.0, 2.5], i(150.0, 18.0), i(490.0, 20.0), true),
                nucleus("RN", [-8.0, -5.0, 4.0], [2.5, 2.5, 2.5], i(120.0, 18.0), i(490.0, 20.0), true),
                nucleus("DN", [-30.0, -34.0, 14.0], [3.0, 4.0, 2.5], i(215.0, 18.0), i(490.0, 20.0), true),
            ],
            background_qsm: i(0.0, 18.0),
            background_t1: i(500.0, 20.0),
            brain_semi_axes_mm: [62.0, 80.0, 62.0],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Same layout on a different grid.
    pub fn with_grid(mut self, shape: Shape3, spacing: [f64; 3]) -> Self {
        self.shape = shape;
        self.spacing = spacing;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Every distribution collapsed onto its mean.
    pub fn noise_free(mut self) -> Self {
        self.background_qsm.std = 0.0;
        self.background_t1.std = 0.0;
        for c in &mut self.classes {
            c.qsm.std = 0.0;
            c.t1.std = 0.0;
        }
        self
    }

    /// Multiplies every standard deviation by `factor`.
    pub fn scale_noise(mut self, factor: f32) -> Self {
        self.background_qsm.std *= factor;
        self.background_t1.std *= factor;
        for c in &mut self.classes {
            c.qsm.std *= factor;
            c.t1.std *= factor;
        }
        self
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len() + 1
    }

    /// Label values of the classes flagged as small structures.
    pub fn small_classes(&self) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.small)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn geometry(&self) -> Result<Geometry> {
        let origin = [0, 1, 2].map(|a| -(self.shape[a] as f64 - 1.0) / 2.0 * self.spacing[a]);
        Geometry::new(self.shape, self.spacing, origin)
    }

    /// Both hemispheric copies of every nucleus.
    pub fn ellipsoids(&self) -> Vec<Ellipsoid> {
        let mut out = Vec::with_capacity(2 * self.classes.len());
        for (i, c) in self.classes.iter().enumerate() {
            for side in [1.0, -1.0] {
                out.push(Ellipsoid {
                    class: i + 1,
                    center_mm: [c.center_mm[0], c.center_mm[1], side * c.center_mm[2]],
                    semi_axes_mm: c.semi_axes_mm,
                });
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.classes.len() > 254 {
            return Err(Error::Phantom("between 1 and 254 nucleus classes required".into()));
        }
        let all = self
            .classes
            .iter()
            .flat_map(|c| [c.qsm, c.t1])
            .chain([self.background_qsm, self.background_t1]);
        for d in all {
            if !d.mean.is_finite() || !(d.std >= 0.0) || !d.std.is_finite() {
                return Err(Error::Phantom(format!("invalid intensity distribution {d:?}")));
            }
        }
        for c in &self.classes {
            if c.semi_axes_mm.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Phantom(format!("{}: semi-axes must be positive", c.name)));
            }
            if c.center_mm[2] - c.semi_axes_mm[2] <= 0.0 {
                return Err(Error::Phantom(format!("{}: ellipsoid crosses the midline", c.name)));
            }
        }
        self.geometry()?;
        Ok(())
    }
}

/// A phantom subject: voxel grids plus the ellipsoids that produced the label.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub qsm: Volume,
    pub t1: Volume,
    pub label: Volume,
    pub ellipsoids: Vec<Ellipsoid>,
}

/// Rasterizes the spec's own layout.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    generate_with(spec, &spec.ellipsoids())
}

/// Rasterizes `ellipsoids` with the intensity model of `spec`. Fails if two
/// ellipsoids share a voxel or one leaves the grid.
pub fn generate_with(spec: &PhantomSpec, ellipsoids: &[Ellipsoid]) -> Result<Phantom> {
    spec.validate()?;
    let g = spec.geometry()?;
    let label = rasterize(&g, ellipsoids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let brain = Ellipsoid {
        class: 0,
        center_mm: [0.0; 3],
        semi_axes_mm: spec.brain_semi_axes_mm,
    };
    let dists: Vec<(Intensity, Intensity)> = std::iter::once((spec.background_qsm, spec.background_t1))
        .chain(spec.classes.iter().map(|c| (c.qsm, c.t1)))
        .collect();
    let normal = |d: Intensity| Normal::new(d.mean, d.std).map_err(|e| Error::Phantom(e.to_string()));
    let samplers: Vec<(Normal<f32>, Normal<f32>)> = dists
        .iter()
        .map(|&(q, t)| Ok((normal(q)?, normal(t)?)))
        .collect::<Result<_>>()?;
    let n = g.num_voxels();
    let mut qsm = vec![0.0f32; n];
    let mut t1 = vec![0.0f32; n];
    let [d, h, w] = g.shape;
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = g.voxel_to_physical([z as f64, y as f64, x as f64]);
                let c = label[i] as usize;
                if c > 0 || brain.contains(p) {
                    let (sq, st) = &samplers[c];
                    qsm[i] = sq.sample(&mut rng);
                    t1[i] = st.sample(&mut rng);
                }
                i += 1;
            }
        }
    }
    let num_classes = spec.num_classes();
    let label = Volume::from_labels(g, &label, num_classes)?;
    Ok(Phantom {
        qsm: Volume::intensity(g, 1, qsm)?,
        t1: Volume::intensity(g, 1, t1)?,
        label,
        ellipsoids: ellipsoids.to_vec(),
    })
}

fn rasterize(g: &Geometry, ellipsoids: &[Ellipsoid]) -> Result<Vec<u8>> {
    let mut label = vec![0u8; g.num_voxels()];
    let lo_mm = g.voxel_to_physical([0.0; 3]);
    let hi_mm = g.voxel_to_physical([0, 1, 2].map(|a| (g.shape[a] - 1) as f64));
    for (k, e) in ellipsoids.iter().enumerate() {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let (emin, emax) = (e.center_mm[a] - e.semi_axes_mm[a], e.center_mm[a] + e.semi_axes_mm[a]);
            if emin < lo_mm[a] || emax > hi_mm[a] {
                return Err(Error::Phantom(format!(
                    "ellipsoid {k} (class {}) exceeds the grid along axis {a}",
                    e.class
                )));
            }
            lo[a] = ((emin - g.origin[a]) / g.spacing[a]).floor().max(0.0) as usize;
            hi[a] = (((emax - g.origin[a]) / g.spacing[a]).ceil() as usize).min(g.shape[a] - 1);
        }
        for z in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for x in lo[2]..=hi[2] {
                    let p = g.voxel_to_physical([z as f64, y as f64, x as f64]);
                    if !e.contains(p) {
                        continue;
                    }
                    let idx = g.flat_index(z, y, x);
                    if label[idx] != 0 {
                        return Err(Error::Phantom(format!(
                            "class {} overlaps class {} at voxel ({z}, {y}, {x})",
                            e.class, label[idx]
                        )));
                    }
                    label[idx] = e.class as u8;
                }
            }
        }
    }
    Ok(label)
}

/// Per-subject perturbation of the base layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Jitter {
    pub center_mm: f64,
    pub axis_fraction: f64,
    pub max_attempts: usize,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            center_mm: 3.0,
            axis_fraction: 0.1,
            max_attempts: 100,
        }
    }
}

/// Draws a jittered layout that rasterizes without overlap.
pub fn jittered_layout(spec: &PhantomSpec, jitter: &Jitter, rng: &mut impl Rng) -> Result<Vec<Ellipsoid>> {
    let g = spec.geometry()?;
    for _ in 0..jitter.max_attempts.max(1) {
        let layout: Vec<Ellipsoid> = spec
            .ellipsoids()
            .into_iter()
            .map(|mut e| {
                for a in 0..3 {
                    if jitter.center_mm > 0.0 {
                        e.center_mm[a] += rng.random_range(-jitter.center_mm..=jitter.center_mm);
                    }
                    if jitter.axis_fraction > 0.0 {
                        e.semi_axes_mm[a] *= 1.0 + rng.random_range(-jitter.axis_fraction..=jitter.axis_fraction);
                    }
                }
                e
            })
            .collect();
        if rasterize(&g, &layout).is_ok() {
            return Ok(layout);
        }
    }
    Err(Error::Phantom(format!(
        "no overlap-free layout after {} attempts",
        jitter.max_attempts
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitPlan {
    /// Roughly 4:1:1, with at least one training subject.
    pub fn for_subjects(n: usize) -> Self {
        let held = if n >= 3 { (n / 6).max(1) } else { 0 };
        let val = held;
        let test = if n >= 2 { held.max(1) } else { 0 };
        Self {
            train: n - val - test,
            val,
            test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, i: usize) -> Split {
        if i < self.train {
            Split::Train
        } else if i < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Seed of subject `index` in a dataset seeded with `seed`.
pub fn subject_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Generates one jittered subject of a dataset.
pub fn generate_subject(base: &PhantomSpec, jitter: &Jitter, seed: u64, index: usize) -> Result<Phantom> {
    let s = subject_seed(seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let layout = jittered_layout(base, jitter, &mut rng)?;
    let spec = base.clone().with_seed(s);
    generate_with(&spec, &layout)
}

/// Writes `plan.total()` jittered subjects plus `manifest.json` into `out`.
pub fn generate_dataset(
    plan: SplitPlan,
    base: &PhantomSpec,
    jitter: &Jitter,
    seed: u64,
    out: &Path,
) -> Result<DatasetManifest> {
    let n = plan.total();
    if n == 0 || plan.train == 0 {
        return Err(Error::Phantom("at least one training subject is required".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let subject = generate_subject(base, jitter, seed, i)?;
        let id = format!("phantom_{i:03}");
        let qsm = format!("{id}_qsm.nii.gz");
        let t1 = format!("{id}_t1.nii.gz");
        let label = format!("{id}_label.nii.gz");
        save_volume(&subject.qsm, &out.join(&qsm))?;
        save_volume(&subject.t1, &out.join(&t1))?;
        save_volume(&subject.label, &out.join(&label))?;
        entries.push(ManifestEntry {
            id,
            qsm: qsm.into(),
            t1: Some(t1.into()),
            label: label.into(),
            split: plan.split_of(i),
            affine: None,
        });
    }
    let mut manifest = DatasetManifest::new(entries);
    manifest.root = out.to_path_buf();
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// Label volume of class counts, for quick inspection.
pub fn class_counts(label: &Volume, num_classes: usize) -> Vec<usize> {
    debug_assert_eq!(label.kind(), VolumeKind::Label);
    let mut counts = vec![0usize; num_classes];
    for &l in label.data() {
        counts[l as usize] += 1;
    }
    counts
}
