mod common;

use ardir_core::attacks::loss_input_gradient;
use ardir_core::distill::{cross_entropy, ArdirLossConfig, FeatureDistance, StudentFeatureInput, TeacherSignal};
use ardir_core::model::{Classifier, InputShape, LinearClassifier, Mode};
use common::*;

const TOL: f64 = 1e-4;

struct Setup {
    student: ardir_core::model::SmallCnn,
    teacher: ardir_core::model::SmallCnn,
    x: ndarray::Array4<f64>,
    x_adv: ndarray::Array4<f64>,
    y: Vec<usize>,
}

fn setup() -> Setup {
    let x = random_batch(3, 1, 8, 8, 11);
    let x_adv = (&x + &random_batch(3, 1, 8, 8, 12).mapv(|v| 0.1 * (v - 0.5))).mapv(|v| v.clamp(0.0, 1.0));
    Setup {
        student: tiny_cnn(1),
        teacher: tiny_cnn(2),
        x,
        x_adv,
        y: vec![0, 1, 1],
    }
}

#[test]
fn student_fits_parameter_budget() {
    assert!(tiny_cnn(1).num_params() <= 1000);
}

#[test]
fn cross_entropy_parameter_gradient() {
    let s = setup();
    let err = objective_gradient_error(&s.student, &s.x, &s.x_adv, &s.y, None, &ArdirLossConfig::sat());
    assert!(err <= TOL, "{err}");
}

#[test]
fn ard_parameter_gradient_with_temperature_and_mixing() {
    let s = setup();
    let mut cfg = ArdirLossConfig::ard(3.0);
    cfg.alpha = 0.7;
    let signal = TeacherSignal::compute(&s.teacher, &s.x, &s.y, &cfg).unwrap();
    let err = objective_gradient_error(&s.student, &s.x, &s.x_adv, &s.y, Some(&signal), &cfg);
    assert!(err <= TOL, "{err}");
}

#[test]
fn ardir_parameter_gradient() {
    let s = setup();
    for (beta, t) in [(0.6, 1.0), (1.0, 1.0), (0.3, 4.0)] {
        let cfg = ArdirLossConfig::ardir(beta, t);
        let signal = TeacherSignal::compute(&s.teacher, &s.x, &s.y, &cfg).unwrap();
        let err = objective_gradient_error(&s.student, &s.x, &s.x_adv, &s.y, Some(&signal), &cfg);
        assert!(err <= TOL, "beta {beta} t {t}: {err}");
    }
}

#[test]
fn ardir_gradient_with_clean_student_features() {
    let s = setup();
    let mut cfg = ArdirLossConfig::ardir(0.5, 1.0);
    cfg.student_feature_input = StudentFeatureInput::Clean;
    let signal = TeacherSignal::compute(&s.teacher, &s.x_adv, &s.y, &cfg).unwrap();
    let err = objective_gradient_error(&s.student, &s.x, &s.x_adv, &s.y, Some(&signal), &cfg);
    assert!(err <= TOL, "{err}");
}

#[test]
fn ardir_gradient_with_raw_feature_distance() {
    let s = setup();
    let mut cfg = ArdirLossConfig::ardir(0.5, 1.0);
    cfg.distance = FeatureDistance::RawL2;
    let signal = TeacherSignal::compute(&s.teacher, &s.x, &s.y, &cfg).unwrap();
    let err = objective_gradient_error(&s.student, &s.x, &s.x_adv, &s.y, Some(&signal), &cfg);
    assert!(err <= TOL, "{err}");
}

#[test]
fn input_gradient_of_cross_entropy() {
    let s = setup();
    let (_, gx) = loss_input_gradient(&s.student, &s.x, &s.y).unwrap();
    let flat: Vec<f64> = s.x.iter().copied().collect();
    let numeric = central_differences(&flat, 1e-6, |p| {
        let xp = ndarray::Array4::from_shape_vec(s.x.raw_dim(), p.to_vec()).unwrap();
        let logits = s.student.logits(&xp, Mode::Eval).unwrap();
        cross_entropy(&logits, &s.y).unwrap().0.iter().sum()
    });
    let analytic: Vec<f64> = gx.iter().copied().collect();
    let err = relative_error(&analytic, &numeric);
    assert!(err <= TOL, "{err}");
}

#[test]
fn standardized_input_gradient() {
    let mut arch = ardir_core::model::CnnArchitecture::toy(2);
    arch.input_mean = vec![0.3];
    arch.input_std = vec![0.2];
    let model = ardir_core::model::SmallCnn::new(arch, 5).unwrap();
    let x = random_batch(2, 1, 8, 8, 3);
    let y = vec![1, 0];
    let err = objective_gradient_error(&model, &x, &x, &y, None, &ArdirLossConfig::sat());
    assert!(err <= TOL, "{err}");
    let (_, gx) = loss_input_gradient(&model, &x, &y).unwrap();
    let flat: Vec<f64> = x.iter().copied().collect();
    let numeric = central_differences(&flat, 1e-6, |p| {
        let xp = ndarray::Array4::from_shape_vec(x.raw_dim(), p.to_vec()).unwrap();
        cross_entropy(&model.logits(&xp, Mode::Eval).unwrap(), &y).unwrap().0.iter().sum()
    });
    assert!(relative_error(&gx.iter().copied().collect::<Vec<_>>(), &numeric) <= TOL);
}

#[test]
fn linear_classifier_gradients() {
    let shape = InputShape::new(1, 2, 2);
    let model = LinearClassifier::new(shape, vec![0.5, -1.0, 0.25, 2.0, -0.3, 0.7, 1.1, -0.4], vec![0.1, -0.2]).unwrap();
    let x = random_batch(4, 1, 2, 2, 9);
    let x_adv = random_batch(4, 1, 2, 2, 10);
    let y = vec![0, 1, 1, 0];
    let teacher = LinearClassifier::new(shape, vec![1.0, 0.2, -0.5, 0.3, 0.1, -0.9, 0.4, 0.6], vec![0.0, 0.3]).unwrap();
    let cfg = ArdirLossConfig::ardir(0.5, 2.0);
    let signal = TeacherSignal::compute(&teacher, &x, &y, &cfg).unwrap();
    let err = objective_gradient_error(&model, &x, &x_adv, &y, Some(&signal), &cfg);
    assert!(err <= TOL, "{err}");
}
