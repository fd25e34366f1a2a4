//! SGD with momentum, L2 weight decay and a milestone learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate drop: from `epoch` onwards (0-based) the rate is divided by
/// `divisor`. Drops compound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Milestone {
    pub epoch: usize,
    pub divisor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub milestones: Vec<Milestone>,
}

impl Default for TrainingSchedule {
    /// 200 epochs, lr 0.1 divided by 10 at epochs 100 and 150, momentum 0.9,
    /// weight decay 5e-4.
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![
                Milestone { epoch: 100, divisor: 10.0 },
                Milestone { epoch: 150, divisor: 10.0 },
            ],
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.milestones.windows(2).any(|m| m[0].epoch >= m[1].epoch) {
            return Err(Error::config("milestones must be strictly increasing in epoch"));
        }
        if self.milestones.iter().any(|m| !(m.divisor > 1.0)) {
            return Err(Error::config("milestone divisors must exceed 1"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|m| epoch >= m.epoch)
            .fold(self.learning_rate, |lr, m| lr / m.divisor)
    }

    /// Number of batches per epoch for `n` examples (last batch may be short).
    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Momentum SGD state. Weight decay enters the gradient as `λθ` before the
/// momentum update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(schedule: &TrainingSchedule, num_params: usize) -> Self {
        Self {
            momentum: schedule.momentum,
            weight_decay: schedule.weight_decay,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    /// Applies one update in place. Fails without touching `params` when the
    /// gradient has a non-finite entry or the wrong length.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::Shape {
                expected: format!("{} gradient entries", params.len()),
                actual: grad.len().to_string(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::non_finite(format!(
                "gradient entry {i} ({}) of {}",
                grad[i],
                grad.len()
            )));
        }
        for ((p, &g), v) in params.iter_mut().zip(grad).zip(self.velocity.iter_mut()) {
            let d = g + self.weight_decay * *p;
            *v = self.momentum * *v + d;
            *p -= lr * *v;
        }
        Ok(())
    }
}

/// Convenience wrapper: one step for `epoch` under `schedule`.
pub fn sgd_step(
    params: &mut [f64],
    grad: &[f64],
    optimizer: &mut Sgd,
    schedule: &TrainingSchedule,
    epoch: usize,
) -> Result<()> {
    optimizer.step(params, grad, schedule.lr_at(epoch))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(lr: f64, momentum: f64, wd: f64) -> TrainingSchedule {
        TrainingSchedule {
            epochs: 1,
            batch_size: 1,
            learning_rate: lr,
            momentum,
            weight_decay: wd,
            milestones: vec![],
        }
    }

    #[test]
    fn plain_sgd_step() {
        let s = plain(0.1, 0.0, 0.0);
        let mut opt = Sgd::new(&s, 3);
        let mut p = vec![1.0, -2.0, 0.5];
        let g = [0.3, 0.1, -1.0];
        sgd_step(&mut p, &g, &mut opt, &s, 0).unwrap();
        for (i, (&a, &b)) in p.iter().zip(&[1.0 - 0.03, -2.0 - 0.01, 0.5 + 0.1]).enumerate() {
            assert!((a - b).abs() < 1e-15, "{i}");
        }
    }

    #[test]
    fn default_schedule_drops_twice() {
        let s = TrainingSchedule::default();
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(99), 0.1);
        assert!((s.lr_at(100) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(150) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(199) - 0.1 / 100.0).abs() < 1e-15);
    }

    #[test]
    fn momentum_second_update_is_one_point_nine() {
        // v1 = g, v2 = 0.9 g + g
        let s = plain(0.1, 0.9, 0.0);
        let mut opt = Sgd::new(&s, 1);
        let g = [2.0];
        let mut p = vec![0.0];
        sgd_step(&mut p, &g, &mut opt, &s, 0).unwrap();
        let after_first = p[0];
        sgd_step(&mut p, &g, &mut opt, &s, 0).unwrap();
        let second = after_first - p[0];
        assert!((second - 0.1 * 1.9 * 2.0).abs() < 1e-14);
    }

    #[test]
    fn weight_decay_shrinks_toward_zero() {
        let s = plain(0.1, 0.0, 0.01);
        let mut opt = Sgd::new(&s, 2);
        let mut p = vec![3.0, -4.0];
        sgd_step(&mut p, &[0.0, 0.0], &mut opt, &s, 0).unwrap();
        assert!((p[0] - 3.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
        assert!((p[1] + 4.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let s = plain(0.1, 0.9, 0.0);
        let mut opt = Sgd::new(&s, 2);
        let mut p = vec![1.0, 1.0];
        let err = opt.step(&mut p, &[0.0, f64::NAN], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(opt.velocity(), &[0.0, 0.0]);
    }

    #[test]
    fn schedule_validation() {
        let mut s = TrainingSchedule::default();
        assert!(s.validate().is_ok());
        s.milestones.reverse();
        assert!(s.validate().is_err());
        let mut s = TrainingSchedule::default();
        s.milestones[0].divisor = 1.0;
        assert!(s.validate().is_err());
        let mut s = TrainingSchedule::default();
        s.learning_rate = 0.0;
        assert!(s.validate().is_err());
    }
}
