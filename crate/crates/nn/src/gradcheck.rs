//! Central finite-difference verification of the combined loss gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Tape};
use crate::loss::{combined_loss, LossConfig};
use crate::network::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub step: f64,
    pub rel_error: f64,
}

/// Inputs and labels of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossProblem {
    pub local: Tensor<f64>,
    pub global: Option<Tensor<f64>>,
    pub local_labels: Vec<u8>,
    pub global_labels: Option<Vec<u8>>,
    pub loss: LossConfig,
}

impl LossProblem {
    /// Random inputs in `[0, 1)` and random labels shaped for `model`.
    pub fn random(model: &Model<f64>, batch: usize, patch: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = model.spec;
        let shape = [batch, spec.in_channels, patch[0], patch[1], patch[2]];
        let n: usize = shape.iter().product();
        let voxels = batch * patch.iter().product::<usize>();
        let tensor = |rng: &mut ChaCha8Rng| Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>()).collect());
        let local = tensor(&mut rng);
        let global = spec.uses_global().then(|| tensor(&mut rng));
        let k = spec.num_classes as u8;
        let local_labels = (0..voxels).map(|_| rng.random_range(0..k)).collect();
        let global_labels = spec
            .uses_global()
            .then(|| (0..voxels).map(|_| rng.random_range(0..k)).collect());
        Self {
            local,
            global,
            local_labels,
            global_labels,
            loss: LossConfig::default(),
        }
    }

    /// Training-mode loss and its parameter gradients.
    pub fn loss_and_grads(&self, model: &Model<f64>) -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new(&model.params, true);
        let l = tape.input(self.local.clone());
        let g = self.global.clone().map(|t| tape.input(t));
        let out = model.arch.forward(&model.spec, &mut tape, &l, g.as_ref())?;
        let (root, parts) = combined_loss(&mut tape, &out, &self.local_labels, self.global_labels.as_deref(), &self.loss)?;
        Ok((parts.total, tape.backward(root)))
    }

    pub fn loss(&self, model: &Model<f64>) -> Result<f64> {
        let mut tape = Tape::new(&model.params, true);
        let l = tape.input(self.local.clone());
        let g = self.global.clone().map(|t| tape.input(t));
        let out = model.arch.forward(&model.spec, &mut tape, &l, g.as_ref())?;
        Ok(combined_loss(&mut tape, &out, &self.local_labels, self.global_labels.as_deref(), &self.loss)?.1.total)
    }
}

/// Learnable entries whose gradient is not identically zero. A convolution
/// bias that feeds batch normalization is cancelled by the mean subtraction,
/// so its exact gradient is zero and a relative error is undefined there.
pub fn checkable_params(model: &Model<f64>) -> Vec<usize> {
    let entries = model.params.entries();
    let names: std::collections::HashSet<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    (0..entries.len())
        .filter(|&i| {
            let e = &entries[i];
            let shadowed = e
                .name
                .strip_suffix(".b")
                .is_some_and(|stem| names.contains(format!("{stem}.bn.gamma").as_str()));
            e.learnable && !shadowed
        })
        .collect()
}

/// Step sizes tried for every coordinate. Small steps are limited by
/// rounding, large ones by ReLU and max-pool kinks; a correct gradient agrees
/// with the central difference at some scale, a wrong one at none.
pub const STEPS: [f64; 4] = [1e-3, 1e-4, 1e-5, 1e-6];

/// Compares analytic gradients with central differences `(L(θ+h) − L(θ−h)) / 2h`
/// at `count` random coordinates drawn from [`checkable_params`], keeping the
/// step in `steps` with the smallest relative error.
pub fn check_gradients(model: &mut Model<f64>, problem: &LossProblem, count: usize, steps: &[f64], seed: u64) -> Result<Vec<GradSample>> {
    let (_, grads) = problem.loss_and_grads(model)?;
    compare_gradients(model, problem, &grads, count, steps, seed)
}

/// [`check_gradients`] with externally supplied analytic gradients.
pub fn compare_gradients(
    model: &mut Model<f64>,
    problem: &LossProblem,
    grads: &[Tensor<f64>],
    count: usize,
    steps: &[f64],
    seed: u64,
) -> Result<Vec<GradSample>> {
    let learnable = checkable_params(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let p = learnable[rng.random_range(0..learnable.len())];
        let idx = rng.random_range(0..model.params.entries()[p].value.len());
        let orig = model.params.entries()[p].value.data()[idx];
        let analytic = grads[p].data()[idx];
        let mut best: Option<(f64, f64, f64)> = None;
        for &h in steps {
            model.params.entries_mut()[p].value.data_mut()[idx] = orig + h;
            let plus = problem.loss(model)?;
            model.params.entries_mut()[p].value.data_mut()[idx] = orig - h;
            let minus = problem.loss(model)?;
            model.params.entries_mut()[p].value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale == 0.0 { 0.0 } else { (analytic - numeric).abs() / scale };
            if best.map_or(true, |b| rel < b.0) {
                best = Some((rel, numeric, h));
            }
        }
        let (rel_error, numeric, step) = best.expect("at least one step");
        out.push(GradSample {
            param: model.params.entries()[p].name.clone(),
            index: idx,
            analytic,
            numeric,
            step,
            rel_error,
        });
    }
    Ok(out)
}
