//! FGSM and PGD under an l-infinity budget.
//!
//! All attacks maximize the softmax cross-entropy against the true label,
//! compute gradients with the model in eval mode, use `sign(0) = 0`, and
//! clamp adversarial inputs to the pixel domain `[0, 1]`.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array4, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill::cross_entropy;
use crate::error::{Error, Result};
use crate::model::{Classifier, GradTargets, Mode};

/// l-infinity perturbation budget `B = {x + η : ‖η‖∞ ≤ ε}` plus the PGD
/// step schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationBudget {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    #[serde(default = "default_true")]
    pub random_init: bool,
}

fn default_true() -> bool {
    true
}

impl PerturbationBudget {
    /// CIFAR-10 training attack: ε = 8/255, a = 2/255, k = 10.
    pub fn cifar10_train() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 10,
            random_init: true,
        }
    }

    /// CIFAR-10 evaluation attack: as training but k = 20.
    pub fn cifar10_eval() -> Self {
        Self {
            steps: 20,
            ..Self::cifar10_train()
        }
    }

    /// SVHN uses a = 1/255.
    pub fn svhn_train() -> Self {
        Self {
            step_size: 1.0 / 255.0,
            ..Self::cifar10_train()
        }
    }

    pub fn svhn_eval() -> Self {
        Self {
            steps: 20,
            ..Self::svhn_train()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config("epsilon must be finite and non-negative"));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::config("step_size must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        Ok(())
    }

    /// Same budget with a different radius.
    pub fn with_epsilon(self, epsilon: f64) -> Self {
        Self { epsilon, ..self }
    }
}

/// Coordinate-wise projection of a perturbation onto `[-ε, ε]`.
pub fn project_linf(eta: &mut Array4<f64>, epsilon: f64) {
    eta.mapv_inplace(|v| v.clamp(-epsilon, epsilon));
}

/// Moves `a` toward `x0` one float at a time until the rounded difference
/// is within `eps`; `x0 + η` can overshoot by half an ulp of `x0`.
fn within_ball(x0: f64, mut a: f64, eps: f64) -> f64 {
    while a - x0 > eps {
        a = a.next_down();
    }
    while x0 - a > eps {
        a = a.next_up();
    }
    a
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-example cross-entropy loss and its gradient w.r.t. the input.
pub fn loss_input_gradient<M: Classifier>(
    model: &M,
    x: &Array4<f64>,
    y: &[usize],
) -> Result<(Vec<f64>, Array4<f64>)> {
    let pass = model.forward(x, Mode::Eval)?;
    let (losses, grad_logits) = cross_entropy(&pass.logits, y)?;
    let grads = model.backward(&pass, &grad_logits, None, GradTargets::INPUT);
    let gx = grads.input.expect("input gradient requested");
    check_finite_rows(&gx)?;
    Ok((losses, gx))
}

fn check_finite_rows(g: &Array4<f64>) -> Result<()> {
    for (i, row) in g.outer_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("input gradient of batch example {i}")));
        }
    }
    Ok(())
}

fn check_labels(y: &[usize], x: &Array4<f64>, classes: usize) -> Result<()> {
    if y.len() != x.dim().0 {
        return Err(Error::Shape {
            expected: format!("{} labels", x.dim().0),
            actual: y.len().to_string(),
        });
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(Error::config(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// `clamp_[0,1](x + ε · sign(∇x ℓ))`.
pub fn fgsm<M: Classifier>(model: &M, x: &Array4<f64>, y: &[usize], epsilon: f64) -> Result<Array4<f64>> {
    if !(epsilon >= 0.0) {
        return Err(Error::config("epsilon must be non-negative"));
    }
    check_labels(y, x, model.num_classes())?;
    let (_, g) = loss_input_gradient(model, x, y)?;
    let mut adv = x.clone();
    Zip::from(&mut adv).and(&g).for_each(|a, &gv| {
        *a = within_ball(*a, (*a + epsilon * sign(gv)).clamp(0.0, 1.0), epsilon);
    });
    Ok(adv)
}

/// Projected gradient ascent on the cross-entropy, `budget.steps` iterations.
pub fn pgd<M: Classifier, R: Rng + ?Sized>(
    model: &M,
    x: &Array4<f64>,
    y: &[usize],
    budget: &PerturbationBudget,
    rng: &mut R,
) -> Result<Array4<f64>> {
    budget.validate()?;
    check_labels(y, x, model.num_classes())?;
    let eps = budget.epsilon;
    let mut adv = x.clone();
    if budget.random_init {
        Zip::from(&mut adv).for_each(|a| {
            let u: f64 = rng.random();
            *a = within_ball(*a, (*a + eps * (2.0 * u - 1.0)).clamp(0.0, 1.0), eps);
        });
    }
    for _ in 0..budget.steps {
        let (_, g) = loss_input_gradient(model, &adv, y)?;
        Zip::from(&mut adv).and(x).and(&g).for_each(|a, &x0, &gv| {
            let eta = (*a - x0 + budget.step_size * sign(gv)).clamp(-eps, eps);
            *a = within_ball(x0, (x0 + eta).clamp(0.0, 1.0), eps);
        });
    }
    Ok(adv)
}

/// Runs PGD `restarts` times from fresh random starts drawn sequentially
/// from `rng` and keeps, per example, the worst case: a misclassifying
/// restart beats a correctly classified one, then higher final loss wins,
/// then the earlier restart.
pub fn pgd_multi_restart<M: Classifier, R: Rng + ?Sized>(
    model: &M,
    x: &Array4<f64>,
    y: &[usize],
    budget: &PerturbationBudget,
    restarts: usize,
    rng: &mut R,
) -> Result<Array4<f64>> {
    if restarts == 0 {
        return Err(Error::config("restarts must be at least 1"));
    }
    let mut best = pgd(model, x, y, budget, rng)?;
    if restarts == 1 {
        return Ok(best);
    }
    let mut best_key = worst_case_keys(model, &best, y)?;
    for _ in 1..restarts {
        let cand = pgd(model, x, y, budget, rng)?;
        let keys = worst_case_keys(model, &cand, y)?;
        for (i, (k, bk)) in keys.iter().zip(best_key.iter_mut()).enumerate() {
            if (k.0 && !bk.0) || (k.0 == bk.0 && k.1 > bk.1) {
                *bk = *k;
                best.index_axis_mut(ndarray::Axis(0), i)
                    .assign(&cand.index_axis(ndarray::Axis(0), i));
            }
        }
    }
    Ok(best)
}

fn worst_case_keys<M: Classifier>(model: &M, x: &Array4<f64>, y: &[usize]) -> Result<Vec<(bool, f64)>> {
    let logits = model.logits(x, Mode::Eval)?;
    let (losses, _) = cross_entropy(&logits, y)?;
    Ok(predictions(&logits)
        .into_iter()
        .zip(y)
        .zip(losses)
        .map(|((p, &t), l)| (p != t, l))
        .collect())
}

/// Argmax per row; ties resolve to the lowest class index.
pub fn predictions(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Per-example audit record of an attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRow {
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
    pub final_loss: f64,
    pub success: bool,
    pub linf: f64,
}

/// Evaluates the model on finished adversarial examples and records the
/// final loss and whether the attack flipped the prediction.
pub fn attack_transcript<M: Classifier>(
    model: &M,
    x: &Array4<f64>,
    x_adv: &Array4<f64>,
    y: &[usize],
) -> Result<Vec<TranscriptRow>> {
    let logits = model.logits(x_adv, Mode::Eval)?;
    let (losses, _) = cross_entropy(&logits, y)?;
    let preds = predictions(&logits);
    Ok((0..y.len())
        .map(|i| {
            let linf = x
                .index_axis(ndarray::Axis(0), i)
                .iter()
                .zip(x_adv.index_axis(ndarray::Axis(0), i).iter())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            TranscriptRow {
                index: i,
                label: y[i],
                prediction: preds[i],
                final_loss: losses[i],
                success: preds[i] != y[i],
                linf,
            }
        })
        .collect())
}

pub fn write_transcript_csv<W: Write>(rows: &[TranscriptRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<transcript>", e))?;
    Ok(())
}

pub fn save_transcript_csv(rows: &[TranscriptRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_transcript_csv(rows, f)
}
