use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Optimization schedule for fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    /// Consistency-weight ramp length in iterations; `None` means half the run.
    pub rampup_length: Option<usize>,
    pub alpha_max: Real,
    /// Learning rate of patch embedding, positions and the patch-wise transformer.
    pub lr_backbone: Real,
    /// Learning rate of every other parameter.
    pub lr_new: Real,
    pub constant_lr_epochs: usize,
    pub decay_per_epoch: Real,
    pub ema_beta: Real,
    pub weight_decay: Real,
    pub adam_beta1: Real,
    pub adam_beta2: Real,
    pub adam_eps: Real,
}

impl Default for TrainSchedule {
    /// Full-scale values for a large pretrained backbone.
    fn default() -> Self {
        TrainSchedule {
            epochs: 10,
            rampup_length: None,
            alpha_max: 2.0,
            lr_backbone: 5e-6,
            lr_new: 1e-4,
            constant_lr_epochs: 5,
            decay_per_epoch: 0.7,
            ema_beta: 0.999,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainSchedule {
    /// Rates suited to the small randomly initialized toy model.
    pub fn toy() -> Self {
        TrainSchedule { epochs: 24, lr_backbone: 3e-4, lr_new: 2e-3, constant_lr_epochs: 12, decay_per_epoch: 0.8, ema_beta: 0.99, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_backbone", self.lr_backbone),
            ("lr_new", self.lr_new),
            ("decay_per_epoch", self.decay_per_epoch),
            ("adam_eps", self.adam_eps),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("train.{k} must be positive, got {v}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.constant_lr_epochs > self.epochs {
            return Err(Error::Config(format!(
                "train.constant_lr_epochs {} exceeds train.epochs {}",
                self.constant_lr_epochs, self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_beta) {
            return Err(Error::Config("train.ema_beta must lie in [0, 1]".into()));
        }
        if self.alpha_max < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("train.alpha_max and train.weight_decay must be nonnegative".into()));
        }
        for (k, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{k} must lie in [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn rampup_for(&self, total_iterations: usize) -> usize {
        self.rampup_length.unwrap_or(total_iterations / 2)
    }

    /// Multiplier on the base rates during 0-based `epoch`.
    pub fn lr_factor(&self, epoch: usize) -> Real {
        if epoch < self.constant_lr_epochs {
            1.0
        } else {
            self.decay_per_epoch.powi((epoch + 1 - self.constant_lr_epochs) as i32)
        }
    }
}

/// Consistency weight `alpha_max * exp(-5 (1 - min(t, R) / R)^2)`.
pub fn alpha_ramp(t: usize, rampup: usize, alpha_max: Real) -> Real {
    if rampup == 0 {
        return alpha_max;
    }
    let x = 1.0 - t.min(rampup) as Real / rampup as Real;
    alpha_max * (-5.0 * x * x).exp()
}

/// Clips drawn from each source per iteration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub strong_real: usize,
    pub strong_synth: usize,
    pub weak: usize,
    pub unlabeled: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self::from_ratio(12, [1, 1, 2, 2])
    }
}

impl BatchSpec {
    /// Splits `total` by `ratio`, giving rounding leftovers to the earliest sources.
    pub fn from_ratio(total: usize, ratio: [usize; 4]) -> Self {
        let sum: usize = ratio.iter().sum::<usize>().max(1);
        let mut c: Vec<usize> = ratio.iter().map(|r| total * r / sum).collect();
        let mut left = total - c.iter().sum::<usize>();
        for (i, slot) in c.iter_mut().enumerate() {
            if left == 0 {
                break;
            }
            if ratio[i] > 0 {
                *slot += 1;
                left -= 1;
            }
        }
        BatchSpec { strong_real: c[0], strong_synth: c[1], weak: c[2], unlabeled: c[3] }
    }

    pub fn counts(&self) -> [usize; 4] {
        [self.strong_real, self.strong_synth, self.weak, self.unlabeled]
    }

    pub fn total(&self) -> usize {
        self.counts().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Config("batch must hold at least one clip".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints_and_monotonicity() {
        assert_eq!(alpha_ramp(100, 100, 2.0), 2.0);
        assert!((alpha_ramp(0, 100, 2.0) - 2.0 * (-5.0 as Real).exp()).abs() < 1e-15);
        assert!((alpha_ramp(0, 100, 2.0) - 0.01348).abs() < 1e-5);
        let v: Vec<Real> = (0..150).map(|t| alpha_ramp(t, 100, 2.0)).collect();
        assert!(v.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(alpha_ramp(0, 0, 2.0), 2.0);
    }

    #[test]
    fn lr_trajectory() {
        let s = TrainSchedule::default();
        let lr: Vec<Real> = (0..10).map(|e| s.lr_new * s.lr_factor(e)).collect();
        assert!(lr[..5].iter().all(|&x| x == 1e-4));
        assert!((lr[5] - 0.7e-4).abs() < 1e-18);
        assert!((lr[6] - 0.49e-4).abs() < 1e-18);
    }

    #[test]
    fn batch_composition() {
        assert_eq!(BatchSpec::default().counts(), [2, 2, 4, 4]);
        assert_eq!(BatchSpec::from_ratio(6, [1, 1, 2, 2]).counts(), [1, 1, 2, 2]);
    }

    #[test]
    fn schedule_validation() {
        TrainSchedule::default().validate().unwrap();
        TrainSchedule::toy().validate().unwrap();
        assert!(TrainSchedule { constant_lr_epochs: 11, ..TrainSchedule::default() }.validate().is_err());
    }
}
