//! Reduce-on-plateau learning-rate schedule with a termination floor.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub initial_lr: f64,
    pub factor: f64,
    /// Epochs without improvement before a reduction.
    pub patience: usize,
    /// Minimum decrease of the validation loss that counts as progress.
    pub threshold: f64,
    /// Training stops once the rate falls below this.
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            initial_lr: 3e-4,
            factor: 0.1f64.sqrt(),
            patience: 10,
            threshold: 1e-6,
            min_lr: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauEvent {
    Improved,
    Waiting,
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub cfg: PlateauConfig,
    pub best: f64,
    pub bad_epochs: usize,
    pub reductions: u32,
}

impl PlateauScheduler {
    pub fn new(cfg: PlateauConfig) -> Self {
        Self {
            cfg,
            best: f64::INFINITY,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    /// `initial_lr · factor^k` after `k` reductions.
    pub fn lr(&self) -> f64 {
        self.cfg.initial_lr * self.cfg.factor.powi(self.reductions as i32)
    }

    pub fn finished(&self) -> bool {
        self.lr() < self.cfg.min_lr
    }

    pub fn step(&mut self, val_loss: f64) -> PlateauEvent {
        if val_loss < self.best - self.cfg.threshold {
            self.best = val_loss;
            self.bad_epochs = 0;
            return PlateauEvent::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.cfg.patience {
            self.bad_epochs = 0;
            self.reductions += 1;
            PlateauEvent::Reduced
        } else {
            PlateauEvent::Waiting
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_reduction_value() {
        let mut s = PlateauScheduler::new(PlateauConfig::default());
        s.step(1.0);
        for _ in 0..10 {
            s.step(1.0);
        }
        assert_eq!(s.reductions, 1);
        assert!((s.lr() - 9.4868e-5).abs() < 1e-9);
    }

    #[test]
    fn five_reductions_to_termination() {
        let mut s = PlateauScheduler::new(PlateauConfig::default());
        let mut lrs = vec![s.lr()];
        while !s.finished() {
            if s.step(1.0) == PlateauEvent::Reduced {
                lrs.push(s.lr());
            }
        }
        assert_eq!(s.reductions, 5);
        for (k, lr) in lrs.iter().enumerate() {
            assert_eq!(*lr, 3e-4 * 0.1f64.sqrt().powi(k as i32));
        }
        assert!(lrs[4] >= 1e-6 && lrs[5] < 1e-6);
    }

    #[test]
    fn improving_loss_never_reduces() {
        let mut s = PlateauScheduler::new(PlateauConfig::default());
        for i in 0..100 {
            assert_eq!(s.step(10.0 - i as f64 * 0.01), PlateauEvent::Improved);
        }
        assert_eq!(s.lr(), 3e-4);
    }

    proptest::proptest! {
        #[test]
        fn lr_is_non_increasing_power_of_factor(losses in proptest::collection::vec(0.0f64..2.0, 0..200)) {
            let mut s = PlateauScheduler::new(PlateauConfig::default());
            let mut prev = s.lr();
            for v in losses {
                let before = s.reductions;
                let event = s.step(v);
                proptest::prop_assert!(s.lr() <= prev);
                proptest::prop_assert_eq!(s.reductions - before, u32::from(event == PlateauEvent::Reduced));
                proptest::prop_assert!(s.bad_epochs < s.cfg.patience);
                prev = s.lr();
            }
        }
    }
}
