//! PNG overlays of label maps and regression scatter plots.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use nucseg_core::Volume;
use nucseg_nn::evaluate::RegressionReport;

/// Colors of classes 1..=7; background is transparent.
pub const PALETTE: [[u8; 3]; 7] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

fn class_color(class: usize) -> Option<[u8; 3]> {
    class.checked_sub(1).and_then(|i| PALETTE.get(i % PALETTE.len())).copied()
}

/// Axial slice `z` of channel 0 of `image`, min-max scaled to gray, with
/// `labels` blended at 50% opacity.
pub fn overlay_slice(image: &Volume, labels: &Volume, z: usize) -> RgbImage {
    let [_, h, w] = image.shape();
    let plane = &image.channel(0)[z * h * w..(z + 1) * h * w];
    let (lo, hi) = plane
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let lab = &labels.data()[z * h * w..(z + 1) * h * w];
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let g = ((plane[i] - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8;
        match class_color(lab[i] as usize) {
            Some(c) => Rgb([0, 1, 2].map(|k| ((u16::from(g) + u16::from(c[k])) / 2) as u8)),
            None => Rgb([g, g, g]),
        }
    })
}

/// Slice with the most labelled voxels, or the middle slice if none.
pub fn busiest_slice(labels: &Volume) -> usize {
    let [d, h, w] = labels.shape();
    let counts: Vec<usize> = (0..d)
        .map(|z| labels.data()[z * h * w..(z + 1) * h * w].iter().filter(|&&l| l > 0.0).count())
        .collect();
    match counts.iter().enumerate().max_by_key(|(_, &c)| c) {
        Some((z, &c)) if c > 0 => z,
        _ => d / 2,
    }
}

pub fn save_overlay(image: &Volume, labels: &Volume, path: &Path) -> Result<()> {
    overlay_slice(image, labels, busiest_slice(labels))
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

/// Scatter of `(manual, predicted)` with the identity line in gray and the
/// fitted regression line in red.
pub fn scatter_plot(manual: &[f64], predicted: &[f64], fit: Option<&RegressionReport>, size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let all = manual.iter().chain(predicted);
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return img;
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    let (lo, hi) = (lo - pad, hi + pad);
    let margin = 8.0;
    let to_px = |v: f64| margin + (v - lo) / (hi - lo) * (f64::from(size) - 2.0 * margin);
    let mut put = |x: f64, y: f64, c: Rgb<u8>| {
        let (px, py) = (x.round(), f64::from(size) - 1.0 - y.round());
        if px >= 0.0 && py >= 0.0 && px < f64::from(size) && py < f64::from(size) {
            img.put_pixel(px as u32, py as u32, c);
        }
    };
    for k in 0..size * 2 {
        let v = lo + (hi - lo) * f64::from(k) / f64::from(size * 2);
        put(to_px(v), to_px(v), Rgb([190, 190, 190]));
        if let Some(f) = fit {
            put(to_px(v), to_px(f.slope * v + f.intercept), Rgb([220, 30, 30]));
        }
    }
    for (&m, &p) in manual.iter().zip(predicted) {
        for dx in -2..=2 {
            for dy in -2..=2 {
                put(to_px(m) + f64::from(dx), to_px(p) + f64::from(dy), Rgb([20, 60, 200]));
            }
        }
    }
    img
}
