mod common;

use ardir_core::attacks::{fgsm, pgd, predictions, project_linf, PerturbationBudget};
use ardir_core::checkpoint::Checkpoint;
use ardir_core::distill::{
    kl_divergence, lpips_normalize, replace_wrong_teacher_labels, row_distances, softmax_rows, softmax_temperature,
};
use ardir_core::eval::GapReport;
use ardir_core::harness::config::ExperimentConfig;
use ardir_core::model::{Classifier, CnnArchitecture, SmallCnn};
use ardir_core::optim::{Sgd, TrainingSchedule};
use ardir_core::seed::derive_seed;
use ardir_core::train::{best_epoch_index, TeacherConfig, TeacherDataMode, TeacherModelKind};
use ndarray::{Array2, Array4, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(n: usize) -> impl Strategy<Value = Array4<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), 0.0..=1.0f64], n * 64)
        .prop_map(move |v| Array4::from_shape_vec((n, 1, 8, 8), v).unwrap())
}

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0..8.0f64, k).prop_map(|z| softmax_temperature(&z, 1.0).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_bounded_and_idempotent(v in prop::collection::vec(-2.0..2.0f64, 16), eps in 0.0..1.0f64) {
        let mut eta = Array4::from_shape_vec((1, 1, 4, 4), v).unwrap();
        project_linf(&mut eta, eps);
        prop_assert!(eta.iter().all(|x| x.abs() <= eps));
        let once = eta.clone();
        project_linf(&mut eta, eps);
        prop_assert_eq!(once, eta);
    }

    #[test]
    fn pgd_respects_budget_and_box(
        x in image(2),
        eps in 0.0..0.5f64,
        step in 0.001..0.2f64,
        steps in 1usize..4,
        seed in any::<u64>(),
        init in any::<bool>(),
    ) {
        let model = common::tiny_cnn(seed % 7);
        let budget = PerturbationBudget { epsilon: eps, step_size: step, steps, random_init: init };
        let adv = pgd(&model, &x, &[0, 1], &budget, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (a, x0) in adv.iter().zip(x.iter()) {
            prop_assert!((a - x0).abs() <= eps);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn zero_budget_attacks_are_identity(x in image(1), seed in any::<u64>()) {
        let model = common::tiny_cnn(3);
        prop_assert_eq!(&fgsm(&model, &x, &[1], 0.0).unwrap(), &x);
        let budget = PerturbationBudget { epsilon: 0.0, step_size: 0.01, steps: 3, random_init: true };
        prop_assert_eq!(&pgd(&model, &x, &[1], &budget, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap(), &x);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_equal(p in distribution(5), q in distribution(5)) {
        prop_assert!(kl_divergence(&p, &q) >= -1e-15);
        prop_assert_eq!(kl_divergence(&p, &p), 0.0);
    }

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-50.0..50.0f64, 1..10), t in 0.1..30.0f64) {
        let p = softmax_temperature(&z, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn replacement_makes_targets_agree_with_labels(
        logits in prop::collection::vec(-5.0..5.0f64, 12),
        y in prop::collection::vec(0usize..4, 3),
        t in 0.5..30.0f64,
    ) {
        let z = Array2::from_shape_vec((3, 4), logits).unwrap();
        let s = replace_wrong_teacher_labels(&z, &y, t).unwrap();
        let soft = softmax_rows(&z, t).unwrap();
        let raw = predictions(&z);
        for i in 0..3 {
            prop_assert_eq!(s.replaced[i], raw[i] != y[i]);
            if s.replaced[i] {
                for c in 0..4 {
                    prop_assert_eq!(s.targets[[i, c]], if c == y[i] { 1.0 } else { 0.0 });
                }
            } else {
                prop_assert_eq!(s.targets.row(i), soft.row(i));
            }
        }
        prop_assert_eq!(predictions(&s.targets), y);
    }

    #[test]
    fn lpips_features_ignore_channel_scale(
        v in prop::collection::vec(0.01..5.0f64, 2 * 3 * 16),
        scales in prop::collection::vec(0.01..100.0f64, 3),
    ) {
        let tap = Array4::from_shape_vec((2, 3, 4, 4), v).unwrap();
        let mut scaled = tap.clone();
        for (c, mut ch) in scaled.axis_iter_mut(Axis(1)).enumerate() {
            ch.mapv_inplace(|x| x * scales[c]);
        }
        let a = lpips_normalize(&[tap]).values;
        let b = lpips_normalize(&[scaled]).values;
        prop_assert!(common::relative_error(a.as_slice().unwrap(), b.as_slice().unwrap()) <= 1e-12);
        // each channel block sums to 1/sqrt(HW)
        for row in a.outer_iter() {
            for c in 0..3 {
                let s: f64 = row.slice(ndarray::s![c * 16..(c + 1) * 16]).sum();
                prop_assert!((s - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn row_distance_is_symmetric_and_zero_on_self(
        a in prop::collection::vec(-1.0..1.0f64, 8),
        b in prop::collection::vec(-1.0..1.0f64, 8),
    ) {
        let a = Array2::from_shape_vec((2, 4), a).unwrap();
        let b = Array2::from_shape_vec((2, 4), b).unwrap();
        prop_assert_eq!(row_distances(&a, &b).0, row_distances(&b, &a).0);
        prop_assert!(row_distances(&a, &a).0.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn gap_columns_are_consistent(train in 0.01..1.0f64, test in 0.0..1.0f64) {
        let r = GapReport::from_pairs(&[("PGD", train, test)]);
        let c = r.column("PGD").unwrap();
        prop_assert_eq!(c.gap, train - test);
        prop_assert!((c.ratio.unwrap() * train - test).abs() < 1e-12);
    }

    #[test]
    fn best_epoch_is_first_maximum(v in prop::collection::vec(0.0..1.0f64, 1..40)) {
        let i = best_epoch_index(&v).unwrap();
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(v[i], max);
        prop_assert!(v[..i].iter().all(|&x| x < max));
    }

    #[test]
    fn config_round_trip(
        beta in 0.0..=1.0f64,
        t in 0.5..40.0f64,
        seeds in prop::collection::vec(any::<u32>(), 1..4),
        epochs in 1usize..300,
    ) {
        let mut c = ExperimentConfig::toy_ardir(beta, t);
        c.seeds = seeds.into_iter().map(u64::from).collect();
        c.schedule.epochs = epochs;
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back, c);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), scale in -1e6..1e6f64) {
        let mut m = SmallCnn::new(CnnArchitecture::toy(3), seed).unwrap();
        m.params_mut()[0] = scale;
        m.params_mut()[1] = f64::MIN_POSITIVE;
        let ck = Checkpoint::from_model(&m, 1, seed);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap().to_model().unwrap();
        let bits = |m: &SmallCnn| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn sgd_without_gradient_or_decay_is_still(params in prop::collection::vec(-3.0..3.0f64, 1..20), lr in 0.0..1.0f64) {
        let schedule = TrainingSchedule { weight_decay: 0.0, ..TrainingSchedule::default() };
        let mut sgd = Sgd::new(&schedule, params.len());
        let mut p = params.clone();
        for _ in 0..3 {
            sgd.step(&mut p, &vec![0.0; params.len()], lr).unwrap();
        }
        prop_assert_eq!(p, params);
    }

    #[test]
    fn seed_derivation_is_a_function(base in any::<u64>(), parts in prop::collection::vec(any::<u64>(), 0..4)) {
        prop_assert_eq!(derive_seed(base, &parts), derive_seed(base, &parts));
    }
}

#[test]
fn clean_model_with_adversarial_data_is_always_rejected() {
    assert!(TeacherConfig::new(TeacherModelKind::Clean, TeacherDataMode::Adversarial).is_err());
    for (m, d) in [
        (TeacherModelKind::Clean, TeacherDataMode::Clean),
        (TeacherModelKind::Robust, TeacherDataMode::Clean),
        (TeacherModelKind::Robust, TeacherDataMode::Adversarial),
    ] {
        assert!(TeacherConfig::new(m, d).is_ok());
    }
}
