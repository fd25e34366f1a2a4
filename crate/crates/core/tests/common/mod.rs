#![allow(dead_code)]

use ardir_core::distill::{objective, ArdirLossConfig, TeacherSignal};
use ardir_core::model::{Classifier, CnnArchitecture, SmallCnn};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_batch(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn((n, c, h, w), |_| rng.random_range(0.05..0.95))
}

pub fn random_labels(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Three-block toy CNN with two classes (under 1000 parameters).
pub fn tiny_cnn(seed: u64) -> SmallCnn {
    SmallCnn::new(CnnArchitecture::toy(2), seed).unwrap()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `params`.
pub fn central_differences(params: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error between the analytic student gradient of `objective` and
/// central differences, with the teacher signal held fixed.
pub fn objective_gradient_error<M: Classifier + Clone>(
    student: &M,
    x_clean: &Array4<f64>,
    x_adv: &Array4<f64>,
    y: &[usize],
    signal: Option<&TeacherSignal>,
    config: &ArdirLossConfig,
) -> f64 {
    let analytic = objective(student, x_clean, x_adv, y, signal, config).unwrap().param_grad;
    let mut probe = student.clone();
    let numeric = central_differences(student.params(), 1e-6, |p| {
        probe.params_mut().copy_from_slice(p);
        objective(&probe, x_clean, x_adv, y, signal, config).unwrap().terms.total
    });
    relative_error(&analytic, &numeric)
}
