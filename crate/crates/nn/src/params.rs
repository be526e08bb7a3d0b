//! Named parameter storage shared by the graph builders and the optimizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::{Shape5, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (batch-norm running statistics) are stored but not optimized.
    pub learnable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

/// Ids of one batch-normalization layer.
#[derive(Debug, Clone, Copy)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, learnable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            learnable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of learnable scalars.
    pub fn count_learnable(&self) -> usize {
        self.entries.iter().filter(|e| e.learnable).map(|e| e.value.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| Tensor::zeros(e.value.shape())).collect()
    }

    pub fn add_bn(&mut self, prefix: &str, channels: usize) -> BnIds {
        BnIds {
            gamma: self.add(format!("{prefix}.gamma"), Tensor::full([channels, 1, 1, 1, 1], T::one()), true),
            beta: self.add(format!("{prefix}.beta"), Tensor::zeros([channels, 1, 1, 1, 1]), true),
            running_mean: self.add(format!("{prefix}.running_mean"), Tensor::zeros([channels, 1, 1, 1, 1]), false),
            running_var: self.add(
                format!("{prefix}.running_var"),
                Tensor::full([channels, 1, 1, 1, 1], T::one()),
                false,
            ),
        }
    }

    /// Applies recorded running-statistic updates:
    /// `r ← (1 − momentum)·r + momentum·batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        let m = BN_MOMENTUM;
        for u in updates {
            for (id, stat) in [(u.ids.running_mean, &u.mean), (u.ids.running_var, &u.var_unbiased)] {
                for (r, &b) in self.get_mut(id).data_mut().iter_mut().zip(stat.iter()) {
                    *r = T::of((1.0 - m) * r.f64() + m * b);
                }
            }
        }
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    learnable: e.learnable,
                })
                .collect(),
        }
    }
}

/// Batch statistics observed by one training-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub ids: BnIds,
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

/// He-normal initializer for convolution weights.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn he_normal<T: Scalar>(&mut self, shape: Shape5, fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| T::of(dist.sample(&mut self.rng))).collect())
    }
}
