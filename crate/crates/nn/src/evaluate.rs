//! Per-subject Dice and ROI measurements, pooled regression and report files.

use std::fs;
use std::path::Path;

use nucseg_core::metrics::{dice_all, mean_std, regression_stats, roi_stats, Regression, RoiStats};
use nucseg_core::{ClassScheme, Volume};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::infer::Timing;

#[derive(Debug, Clone)]
pub struct SubjectEval {
    pub id: String,
    /// Dice of every foreground class, in class order.
    pub dice: Vec<f64>,
    pub predicted: RoiStats,
    pub manual: RoiStats,
}

/// Compares `pred` with `truth`; susceptibility is read from the unclipped
/// `qsm`.
pub fn evaluate_subject(id: &str, pred: &Volume, truth: &Volume, qsm: &Volume, scheme: &ClassScheme) -> Result<SubjectEval> {
    let k = scheme.num_classes();
    let all = dice_all(pred, truth, k)?;
    Ok(SubjectEval {
        id: id.to_string(),
        dice: scheme.foreground().map(|c| all[c]).collect(),
        predicted: roi_stats(pred, qsm, k)?,
        manual: roi_stats(truth, qsm, k)?,
    })
}

/// One CSV row: a subject and class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub subject: String,
    pub class: String,
    pub dice: f64,
    pub susceptibility_pred: Option<f64>,
    pub susceptibility_manual: Option<f64>,
    pub volume_pred_mm3: Option<f64>,
    pub volume_manual_mm3: Option<f64>,
}

pub fn report_rows(evals: &[SubjectEval], scheme: &ClassScheme) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for e in evals {
        for (i, c) in scheme.foreground().enumerate() {
            let p = e.predicted.get(c);
            let m = e.manual.get(c);
            rows.push(ReportRow {
                subject: e.id.clone(),
                class: scheme.name(c).to_string(),
                dice: e.dice[i],
                susceptibility_pred: p.map(|r| r.mean),
                susceptibility_manual: m.map(|r| r.mean),
                volume_pred_mm3: p.map(|r| r.volume_mm3),
                volume_manual_mm3: m.map(|r| r.volume_mm3),
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDice {
    pub class: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub slope: f64,
    pub intercept: f64,
    pub pearson_r: f64,
    pub n: usize,
}

impl From<Regression> for RegressionReport {
    fn from(r: Regression) -> Self {
        Self {
            slope: r.slope,
            intercept: r.intercept,
            pearson_r: r.pearson_r,
            n: r.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub mean_s: f64,
    pub std_s: f64,
    /// `mean±std s`.
    pub formatted: String,
    pub runs: usize,
    pub device: String,
}

impl From<&Timing> for TimingReport {
    fn from(t: &Timing) -> Self {
        Self {
            mean_s: t.mean_s,
            std_s: t.std_s,
            formatted: format!("{:.3}±{:.3} s", t.mean_s, t.std_s),
            runs: t.runs,
            device: t.device.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub subjects: usize,
    /// Mean Dice of each foreground class across subjects.
    pub dice: Vec<ClassDice>,
    pub mean_dice: f64,
    /// Predicted against manual ROI means pooled over subjects and classes;
    /// absent when fewer than two usable pairs exist.
    pub susceptibility_regression: Option<RegressionReport>,
    pub volume_regression: Option<RegressionReport>,
    pub timing: Option<TimingReport>,
}

/// `(manual, predicted)` pairs over ROIs present in both label maps.
pub fn paired_values(evals: &[SubjectEval], scheme: &ClassScheme, volume: bool) -> (Vec<f64>, Vec<f64>) {
    let (mut manual, mut predicted) = (Vec::new(), Vec::new());
    for e in evals {
        for c in scheme.foreground() {
            if let (Some(m), Some(p)) = (e.manual.get(c), e.predicted.get(c)) {
                manual.push(if volume { m.volume_mm3 } else { m.mean });
                predicted.push(if volume { p.volume_mm3 } else { p.mean });
            }
        }
    }
    (manual, predicted)
}

pub fn summarize(evals: &[SubjectEval], scheme: &ClassScheme, timing: Option<&Timing>) -> Result<Summary> {
    if evals.is_empty() {
        return Err(NnError::Config("nothing to evaluate".into()));
    }
    let dice: Vec<ClassDice> = scheme
        .foreground()
        .enumerate()
        .map(|(i, c)| {
            let v: Vec<f64> = evals.iter().map(|e| e.dice[i]).collect();
            let (mean, std) = mean_std(&v);
            ClassDice {
                class: scheme.name(c).to_string(),
                mean,
                std,
            }
        })
        .collect();
    let mean_dice = dice.iter().map(|d| d.mean).sum::<f64>() / dice.len() as f64;
    let reg = |volume: bool| {
        let (m, p) = paired_values(evals, scheme, volume);
        regression_stats(&m, &p).ok().map(RegressionReport::from)
    };
    Ok(Summary {
        subjects: evals.len(),
        dice,
        mean_dice,
        susceptibility_regression: reg(false),
        volume_regression: reg(true),
        timing: timing.map(TimingReport::from),
    })
}

/// Writes `report.csv` and `summary.json` into `dir`.
pub fn write_report(dir: &Path, rows: &[ReportRow], summary: &Summary) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| NnError::io(dir, e))?;
    let csv_path = dir.join("report.csv");
    let to_io = |e: csv::Error| NnError::io(&csv_path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(&csv_path).map_err(to_io)?;
    for r in rows {
        w.serialize(r).map_err(to_io)?;
    }
    w.flush().map_err(|e| NnError::io(&csv_path, e))?;
    let json_path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    fs::write(&json_path, text).map_err(|e| NnError::io(&json_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nucseg_core::Geometry;

    fn vol(labels: &[u8]) -> Volume {
        Volume::from_labels(Geometry::with_shape([1, 1, labels.len()]).unwrap(), labels, 8).unwrap()
    }

    #[test]
    fn perfect_prediction_summary() {
        let scheme = ClassScheme::nuclei();
        let truth = vol(&[0, 1, 1, 2, 3, 4, 5, 6, 7, 7]);
        let qsm = Volume::intensity(*truth.geometry(), 1, (0..10).map(|i| i as f32 * 10.0).collect()).unwrap();
        let evals: Vec<_> = (0..2)
            .map(|i| evaluate_subject(&format!("s{i}"), &truth, &truth, &qsm, &scheme).unwrap())
            .collect();
        let s = summarize(&evals, &scheme, None).unwrap();
        assert_eq!(s.dice.len(), 7);
        assert!(s.dice.iter().all(|d| d.mean == 1.0 && d.std == 0.0));
        let r = s.susceptibility_regression.unwrap();
        assert!((r.slope - 1.0).abs() < 1e-12 && r.intercept.abs() < 1e-9 && (r.pearson_r - 1.0).abs() < 1e-12);
        assert_eq!(report_rows(&evals, &scheme).len(), 14);
    }

    #[test]
    fn missing_rois_are_skipped() {
        let scheme = ClassScheme::nuclei();
        let truth = vol(&[1, 1, 2, 2]);
        let pred = vol(&[1, 0, 0, 0]);
        let qsm = Volume::filled(*truth.geometry(), 1.0);
        let e = evaluate_subject("a", &pred, &truth, &qsm, &scheme).unwrap();
        let (m, p) = paired_values(std::slice::from_ref(&e), &scheme, true);
        assert_eq!((m.len(), p.len()), (1, 1));
        let rows = report_rows(&[e], &scheme);
        assert_eq!(rows[1].volume_pred_mm3, None);
        assert!(rows[1].volume_manual_mm3.is_some());
        assert!((rows[0].dice - 2.0 / 3.0).abs() < 1e-12);
    }
}
