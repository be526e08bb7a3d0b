//! Overlap, ROI and regression statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, Volume, VolumeKind};

fn check_same_grid(a: &Geometry, b: &Geometry) -> Result<()> {
    if a.shape != b.shape || !a.approx_eq(b, 1e-4) {
        return Err(Error::Geometry(format!(
            "grids differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn check_label(v: &Volume) -> Result<()> {
    if !v.is_label() || v.channels() != 1 {
        return Err(Error::WrongKind {
            expected: "single-channel label",
        });
    }
    Ok(())
}

/// Dice overlap `2|P∩G| / (|P| + |G|)` of class `class`; 1 when both masks
/// are empty.
pub fn dice(pred: &Volume, truth: &Volume, class: usize) -> Result<f64> {
    check_label(pred)?;
    check_label(truth)?;
    check_same_grid(pred.geometry(), truth.geometry())?;
    let c = class as f32;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        let (ia, ib) = (a == c, b == c);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok(dice_from_counts(p, g, both))
}

pub fn dice_from_counts(pred: usize, truth: usize, overlap: usize) -> f64 {
    if pred + truth == 0 {
        1.0
    } else {
        2.0 * overlap as f64 / (pred + truth) as f64
    }
}

/// Dice of every class in `0..num_classes`, from one pass over the grid.
pub fn dice_all(pred: &Volume, truth: &Volume, num_classes: usize) -> Result<Vec<f64>> {
    check_label(pred)?;
    check_label(truth)?;
    check_same_grid(pred.geometry(), truth.geometry())?;
    let mut p = vec![0usize; num_classes];
    let mut g = vec![0usize; num_classes];
    let mut both = vec![0usize; num_classes];
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        let (a, b) = (a as usize, b as usize);
        if a < num_classes {
            p[a] += 1;
        }
        if b < num_classes {
            g[b] += 1;
        }
        if a == b && a < num_classes {
            both[a] += 1;
        }
    }
    Ok((0..num_classes)
        .map(|c| dice_from_counts(p[c], g[c], both[c]))
        .collect())
}

/// Per-voxel argmax over the channels of a probability volume. Ties resolve
/// to the lower class index.
pub fn argmax(probs: &Volume) -> Volume {
    let n = probs.spatial_len();
    let k = probs.channels();
    let data = probs.data();
    let labels: Vec<f32> = (0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_v = data[i];
            for c in 1..k {
                let v = data[c * n + i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            best as f32
        })
        .collect();
    Volume::from_parts_unchecked(*probs.geometry(), 1, VolumeKind::Label, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiEntry {
    pub class: usize,
    pub mean: f64,
    pub volume_mm3: f64,
    pub voxels: usize,
}

/// Per-class measurements; `entries[c - 1]` is `None` when class `c` is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiStats {
    pub entries: Vec<Option<RoiEntry>>,
}

impl RoiStats {
    pub fn get(&self, class: usize) -> Option<&RoiEntry> {
        class
            .checked_sub(1)
            .and_then(|i| self.entries.get(i))
            .and_then(Option::as_ref)
    }
}

/// Mean of `qsm` and volume over each foreground class of `labels`.
pub fn roi_stats(labels: &Volume, qsm: &Volume, num_classes: usize) -> Result<RoiStats> {
    check_label(labels)?;
    if qsm.channels() != 1 || qsm.is_label() {
        return Err(Error::WrongKind {
            expected: "single-channel intensity",
        });
    }
    check_same_grid(labels.geometry(), qsm.geometry())?;
    let mut sum = vec![0.0f64; num_classes];
    let mut count = vec![0usize; num_classes];
    for (&l, &q) in labels.data().iter().zip(qsm.data()) {
        let c = l as usize;
        if c < num_classes {
            sum[c] += f64::from(q);
            count[c] += 1;
        }
    }
    let vv = labels.geometry().voxel_volume();
    let entries = (1..num_classes)
        .map(|c| {
            (count[c] > 0).then(|| RoiEntry {
                class: c,
                mean: sum[c] / count[c] as f64,
                volume_mm3: count[c] as f64 * vv,
                voxels: count[c],
            })
        })
        .collect();
    Ok(RoiStats { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub pearson_r: f64,
    pub n: usize,
}

/// Least-squares fit `predicted ≈ slope · manual + intercept` with the Pearson
/// correlation. `r` is 0 when the predictions are constant.
pub fn regression_stats(manual: &[f64], predicted: &[f64]) -> Result<Regression> {
    if manual.len() != predicted.len() {
        return Err(Error::Statistics(format!(
            "{} manual values vs {} predicted",
            manual.len(),
            predicted.len()
        )));
    }
    let n = manual.len();
    if n < 2 {
        return Err(Error::Statistics(format!("regression needs at least 2 pairs, got {n}")));
    }
    let nf = n as f64;
    let mx = manual.iter().sum::<f64>() / nf;
    let my = predicted.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&x, &y) in manual.iter().zip(predicted) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 {
        return Err(Error::Statistics("manual values have zero variance".into()));
    }
    let slope = sxy / sxx;
    let pearson_r = if syy > 0.0 {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok(Regression {
        slope,
        intercept: my - slope * mx,
        pearson_r,
        n,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn labels(shape: [usize; 3], l: &[u8]) -> Volume {
        Volume::from_labels(Geometry::with_shape(shape).unwrap(), l, 8).unwrap()
    }

    #[test]
    fn dice_worked_examples() {
        let a = labels([1, 1, 4], &[1, 1, 0, 0]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        let b = labels([1, 1, 4], &[0, 0, 1, 1]);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        // |P| = 4, |G| = 6, overlap 3.
        let p = labels([1, 1, 10], &[1, 1, 1, 1, 0, 0, 0, 0, 0, 0]);
        let g = labels([1, 1, 10], &[0, 1, 1, 1, 1, 1, 1, 0, 0, 0]);
        assert!((dice(&p, &g, 1).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(dice(&p, &g, 5).unwrap(), 1.0);
        let other = labels([1, 2, 5], &[0; 10]);
        assert!(dice(&p, &other, 1).is_err());
    }

    #[test]
    fn dice_matches_voxel_count_oracle() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<u8> = (0..512).map(|_| rng.random_range(0..8)).collect();
            let b: Vec<u8> = (0..512).map(|_| rng.random_range(0..8)).collect();
            let (pa, pb) = (labels([8, 8, 8], &a), labels([8, 8, 8], &b));
            let all = dice_all(&pa, &pb, 8).unwrap();
            for c in 0..8u8 {
                let inter = a.iter().zip(&b).filter(|(&x, &y)| x == c && y == c).count();
                let na = a.iter().filter(|&&x| x == c).count();
                let nb = b.iter().filter(|&&x| x == c).count();
                let oracle = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
                assert_eq!(dice(&pa, &pb, c as usize).unwrap(), oracle);
                assert_eq!(all[c as usize], oracle);
            }
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        let g = Geometry::with_shape([1, 1, 2]).unwrap();
        let p = Volume::intensity(g, 3, vec![0.2, 0.1, 0.4, 0.1, 0.4, 0.8]).unwrap();
        assert_eq!(argmax(&p).labels(), vec![1, 2]);
        let uniform = Volume::intensity(g, 8, vec![0.125; 16]).unwrap();
        assert_eq!(argmax(&uniform).labels(), vec![0, 0]);
    }

    #[test]
    fn roi_examples() {
        let g = Geometry::new([1, 1, 12], [2.0, 0.5134, 0.5134], [0.0; 3]).unwrap();
        let mut l = vec![0u8; 12];
        l[..10].iter_mut().for_each(|v| *v = 3);
        l[11] = 5;
        let lab = Volume::from_labels(g, &l, 8).unwrap();
        let q: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let qsm = Volume::intensity(g, 1, q).unwrap();
        let s = roi_stats(&lab, &qsm, 8).unwrap();
        let e3 = s.get(3).unwrap();
        assert_eq!(e3.voxels, 10);
        assert!((e3.volume_mm3 - 5.27159).abs() < 1e-5);
        assert_eq!(e3.volume_mm3, 10.0 * g.voxel_volume());
        assert_eq!(e3.mean, 4.5);
        assert_eq!(s.get(5).unwrap().mean, 11.0);
        assert!(s.get(1).is_none());
        assert_eq!(s.entries.len(), 7);
    }

    #[test]
    fn regression_examples() {
        let r = regression_stats(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((r.slope, r.intercept, r.pearson_r), (1.0, 0.0, 1.0));
        let r = regression_stats(&[1.0, 2.0, 3.0], &[3.5, 4.5, 5.5]).unwrap();
        assert!((r.slope - 1.0).abs() < 1e-12 && (r.intercept - 2.5).abs() < 1e-12);
        let r = regression_stats(&[1.0, 2.0, 3.0], &[2.0, 3.0, 5.0]).unwrap();
        assert!((r.slope - 1.5).abs() < 1e-12);
        assert!((r.intercept - 1.0 / 3.0).abs() < 1e-12);
        // r = 1.5 / sqrt(14/3 * 2/3 ...) computed independently: sxy=3, sxx=2, syy=14/3.
        let oracle = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
        assert!((r.pearson_r - oracle).abs() < 1e-12);
        assert!((r.pearson_r - 0.9820).abs() < 1e-4);
        assert!(regression_stats(&[1.0], &[1.0]).is_err());
        assert!(regression_stats(&[2.0, 2.0], &[1.0, 3.0]).is_err());
        assert_eq!(regression_stats(&[1.0, 2.0], &[4.0, 4.0]).unwrap().pearson_r, 0.0);
    }

    #[test]
    fn mean_std_population() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    proptest! {
        #[test]
        fn dice_is_symmetric_and_bounded(a in prop::collection::vec(0u8..8, 64), b in prop::collection::vec(0u8..8, 64), c in 0usize..8) {
            let (pa, pb) = (labels([4, 4, 4], &a), labels([4, 4, 4], &b));
            let ab = dice(&pa, &pb, c).unwrap();
            prop_assert_eq!(ab, dice(&pb, &pa, c).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
