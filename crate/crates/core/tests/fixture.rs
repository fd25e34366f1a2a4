use std::path::PathBuf;

use ardir_core::eval::{AttackKind, EpochMetrics};
use ardir_core::harness::config::load_config;
use ardir_core::harness::data::ingest_dataset;
use ardir_core::harness::report::{eval_checkpoint, load_for_config};
use serde_json::Value;

const TOLERANCE: f64 = 0.002;
const ALL: [AttackKind; 3] = [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::PgdMr];

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn check(split: &str, got: &EpochMetrics, want: &Value) {
    let values = [("clean", Some(got.clean)), ("fgsm", got.fgsm), ("pgd", got.pgd), ("pgd_mr", got.pgd_mr)];
    for (key, v) in values {
        let w = want[key].as_f64().unwrap();
        let v = v.unwrap();
        assert!((v - w).abs() <= TOLERANCE, "{split} {key}: got {v}, recorded {w}");
    }
}

#[test]
fn toy_robust_fixture_reproduces_recorded_accuracies() {
    let (config, _) = load_config(&fixture("toy-robust.toml"), &[], false).unwrap();
    let want: Value = serde_json::from_str(&std::fs::read_to_string(fixture("toy-robust.expected.json")).unwrap()).unwrap();
    let model = load_for_config(&fixture("toy-robust.ckpt.json"), &config).unwrap();
    let splits = ingest_dataset(&config.dataset).unwrap();
    let seed = want["eval_seed"].as_u64().unwrap();
    let out = eval_checkpoint(&model, &config, &splits, &ALL, seed, true).unwrap();

    let test = out.row.metrics.unwrap();
    assert_eq!(test.samples, 500);
    check("test", &test, &want["test"]);

    let gap = out.gap.unwrap();
    for (column, key) in [("Clean", "clean"), ("FGSM", "fgsm"), ("PGD", "pgd"), ("PGD-MR", "pgd_mr")] {
        let c = gap.column(column).unwrap();
        let (tr, te) = (want["train"][key].as_f64().unwrap(), want["test"][key].as_f64().unwrap());
        assert!((c.train - tr).abs() <= TOLERANCE, "train {column}");
        assert_eq!(c.gap, c.train - c.test);
        assert_eq!(c.ratio, Some(c.test / c.train));
        assert!((c.gap - (tr - te)).abs() <= 2.0 * TOLERANCE);
    }
}

#[test]
fn empty_attack_list_gives_clean_accuracy_only() {
    let (config, _) = load_config(&fixture("toy-robust.toml"), &[], false).unwrap();
    let model = load_for_config(&fixture("toy-robust.ckpt.json"), &config).unwrap();
    let splits = ingest_dataset(&config.dataset).unwrap();
    let m = eval_checkpoint(&model, &config, &splits, &[], 0, false).unwrap().row.metrics.unwrap();
    assert_eq!((m.fgsm, m.pgd, m.pgd_mr), (None, None, None));
    assert!((m.clean - 0.736).abs() <= TOLERANCE);
}
