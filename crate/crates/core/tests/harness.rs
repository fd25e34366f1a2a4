use std::path::Path;
use std::process::Command;

use ardir_core::checkpoint::Checkpoint;
use ardir_core::distill::ArdirLossConfig;
use ardir_core::harness::config::{load_config, ExperimentConfig, Override};
use ardir_core::harness::data::{ingest_dataset, DatasetSpec};
use ardir_core::harness::registry::TeacherRegistry;
use ardir_core::harness::report::{load_for_config, report};
use ardir_core::harness::run::{read_metrics_csv, train_run, RunManifest, RunOptions, RunPaths};
use ardir_core::harness::sweep::{run_sweep, SweepSpec, SweepTeachers};
use ardir_core::harness::config::ModelSpec;
use ardir_core::eval::AttackKind;
use ardir_core::train::{TeacherCombo, TeacherModelKind};
use ardir_core::Error;

fn micro(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::toy_sat();
    c.name = "micro".into();
    c.seeds = vec![1];
    c.output_dir = out.to_path_buf();
    c.dataset = DatasetSpec::Toy {
        classes: 4,
        size: 8,
        train: 64,
        test: 32,
        noise: 0.1,
        seed: 5,
    };
    c.attack.train.steps = 2;
    c.attack.eval.steps = 3;
    c.attack.restarts = 2;
    c.schedule.epochs = 2;
    c.schedule.batch_size = 16;
    c.schedule.milestones.clear();
    c.evaluation.train_samples = 32;
    c.evaluation.test_samples = 0;
    c.evaluation.final_attacks = vec![AttackKind::Fgsm, AttackKind::Pgd];
    c
}

fn options(registry: &Path) -> RunOptions {
    RunOptions {
        registry: TeacherRegistry::new(registry),
        ..RunOptions::default()
    }
}

/// Micro SAT teacher registered as "micro-robust".
fn register_teacher(root: &Path) -> RunOptions {
    let opts = options(&root.join("teachers"));
    let mut c = micro(&root.join("teacher"));
    c.seeds = vec![9];
    let splits = ingest_dataset(&c.dataset).unwrap();
    train_run(&c, 9, &splits, &opts).unwrap();
    let ck = Checkpoint::load(RunPaths::new(&c.output_dir, 9).best()).unwrap();
    opts.registry.register("micro-robust", &ck, TeacherModelKind::Robust, None).unwrap();
    opts
}

fn micro_ardir(out: &Path, beta: f64) -> ExperimentConfig {
    let mut c = micro(out);
    let teacher = ExperimentConfig::toy_ardir(beta, 1.0).teacher.map(|mut t| {
        t.registered = Some("micro-robust".into());
        t
    });
    c.loss = ArdirLossConfig::ardir(beta, 1.0);
    c.teacher = teacher;
    c
}

fn write_base(path: &Path, config: &ExperimentConfig) {
    std::fs::write(path, config.to_toml().unwrap()).unwrap();
}

#[test]
fn run_writes_artifacts_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let opts = options(&tmp.path().join("teachers"));
    let c = micro(&tmp.path().join("a"));
    let splits = ingest_dataset(&c.dataset).unwrap();
    let m = train_run(&c, 1, &splits, &opts).unwrap();
    let paths = RunPaths::new(&c.output_dir, 1);
    for p in [paths.manifest(), paths.metrics(), paths.best(), paths.last()] {
        assert!(p.exists(), "{} missing", p.display());
    }
    let rows = read_metrics_csv(&paths.metrics()).unwrap();
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(rows, m.metrics);
    assert_eq!(RunManifest::load(&paths.manifest()).unwrap().config_hash, c.hash());
    assert!(m.final_evaluation.is_some());
    assert!(m.teacher_checkpoint_id.is_none());

    let c2 = ExperimentConfig {
        output_dir: tmp.path().join("b"),
        ..c.clone()
    };
    train_run(&c2, 1, &splits, &opts).unwrap();
    let read = |c: &ExperimentConfig| std::fs::read(RunPaths::new(&c.output_dir, 1).metrics()).unwrap();
    assert_eq!(read(&c), read(&c2));
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let tmp = tempfile::tempdir().unwrap();
    let c = micro(&tmp.path().join("full"));
    let splits = ingest_dataset(&c.dataset).unwrap();
    let opts = options(&tmp.path().join("teachers"));
    train_run(&c, 1, &splits, &opts).unwrap();

    let cut = ExperimentConfig {
        output_dir: tmp.path().join("cut"),
        ..c.clone()
    };
    let partial = train_run(
        &cut,
        1,
        &splits,
        &RunOptions {
            max_epochs: Some(1),
            ..options(&tmp.path().join("teachers"))
        },
    )
    .unwrap();
    assert_eq!(partial.metrics.len(), 1);
    assert!(partial.final_evaluation.is_none());
    let resumed = train_run(&cut, 1, &splits, &opts).unwrap();
    assert_eq!(resumed.metrics.len(), 2);

    let ck = |c: &ExperimentConfig| Checkpoint::load(RunPaths::new(&c.output_dir, 1).last()).unwrap().params;
    assert_eq!(ck(&c), ck(&cut));
    let read = |c: &ExperimentConfig| std::fs::read(RunPaths::new(&c.output_dir, 1).metrics()).unwrap();
    assert_eq!(read(&c), read(&cut));
}

#[test]
fn sweep_records_failures_and_keeps_going() {
    let tmp = tempfile::tempdir().unwrap();
    let opts = register_teacher(tmp.path());
    let base = micro_ardir(&tmp.path().join("unused"), 0.5);
    let base_path = tmp.path().join("base.toml");
    write_base(&base_path, &base);

    let spec = SweepSpec {
        schema_version: 1,
        base: base_path,
        parameter: "loss.beta".into(),
        values: vec![0.0.into(), 0.5.into()],
        seeds: Some(vec![1]),
        combos: vec![TeacherCombo::RC, TeacherCombo::CC],
        teachers: Some(SweepTeachers {
            clean: Some("not-registered".into()),
            robust: Some("micro-robust".into()),
        }),
        output_dir: tmp.path().join("sweep"),
    };
    let out = run_sweep(&spec, &base, &opts).unwrap();
    assert_eq!(out.runs.len(), 4);
    let failed: Vec<_> = out.runs.iter().filter(|r| r.outcome.is_err()).collect();
    assert_eq!(failed.len(), 2);
    assert!(failed.iter().all(|r| out.points[r.point].combo == Some(TeacherCombo::CC)));
    assert!(out.summary_csv.exists());
    let failures = std::fs::read_to_string(tmp.path().join("sweep/failures.csv")).unwrap();
    assert_eq!(failures.lines().count(), 3);
    for p in &out.plots {
        assert!(std::fs::read_to_string(p).unwrap().starts_with("<svg"));
    }

    // a one-point sweep matches a direct run of the same config
    let rc_half = out
        .points
        .iter()
        .position(|p| p.combo == Some(TeacherCombo::RC) && p.value.as_float() == Some(0.5))
        .unwrap();
    let direct = ExperimentConfig {
        output_dir: tmp.path().join("direct"),
        ..out.points[rc_half].config.clone()
    };
    let splits = ingest_dataset(&direct.dataset).unwrap();
    train_run(&direct, 1, &splits, &opts).unwrap();
    let read = |c: &ExperimentConfig| std::fs::read(RunPaths::new(&c.output_dir, 1).metrics()).unwrap();
    assert_eq!(read(&direct), read(&out.points[rc_half].config));
}

#[test]
fn report_marks_missing_checkpoints_unavailable() {
    let tmp = tempfile::tempdir().unwrap();
    let opts = options(&tmp.path().join("teachers"));
    let c = micro(&tmp.path().join("r"));
    let splits = ingest_dataset(&c.dataset).unwrap();
    train_run(&c, 1, &splits, &opts).unwrap();
    let paths = RunPaths::new(&c.output_dir, 1);

    let table = report(&[paths.manifest()]).unwrap();
    assert!(table.rows[0].metrics.is_some());
    std::fs::remove_file(paths.best()).unwrap();
    let table = report(&[paths.manifest()]).unwrap();
    assert!(table.rows[0].metrics.is_none());
    assert!(table.rows[0].cells().iter().any(|c| c == "unavailable"));
}

#[test]
fn checkpoint_with_other_taps_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let c = micro(&tmp.path().join("t"));
    let ck = Checkpoint::from_model(
        &ardir_core::model::SmallCnn::new(c.architecture(), 3).unwrap(),
        0,
        3,
    );
    let path = tmp.path().join("m.ckpt.json");
    ck.save(&path).unwrap();
    assert!(load_for_config(&path, &c).is_ok());

    let mut other = c.clone();
    other.model = ModelSpec {
        taps: vec![0],
        ..ModelSpec::toy()
    };
    assert!(matches!(load_for_config(&path, &other), Err(Error::TapMismatch { .. })));
}

#[test]
fn config_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.toml");
    write_base(&path, &micro(tmp.path()));

    let err = load_config(&path, &[Override::parse("loss.beta=1.5").unwrap()], true).unwrap_err();
    assert!(err.to_string().contains("beta"), "{err}");
    let err = load_config(&path, &[Override::parse("schedule.bogus=1").unwrap()], true).unwrap_err();
    assert!(err.to_string().contains("bogus"), "{err}");

    let (c, applied) = load_config(&path, &[Override::parse("schedule.epochs=7").unwrap()], false).unwrap();
    assert_eq!(c.schedule.epochs, 2);
    assert_eq!(applied.ignored, vec!["schedule.epochs".to_string()]);
}

fn cli(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ardir"))
        .args(args)
        .current_dir(cwd)
        .env("ARDIR_TEACHER_DIR", cwd.join("teachers"))
        .output()
        .unwrap()
}

#[test]
fn cli_train_report_and_bad_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("micro.toml");
    write_base(&config, &micro(&tmp.path().join("runs")));

    let out = cli(&["train", "--config", config.to_str().unwrap(), "-q"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = cli(&["report", "runs", "--csv", "results.csv"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("results.csv")).unwrap();
    assert!(csv.starts_with("method,variant,beta,temperature,clean,fgsm,pgd,pgd_mr,best_epoch"));

    let out = cli(
        &["train", "--config", config.to_str().unwrap(), "--beta", "1.5", "--override"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    let out = cli(&["train", "--config", config.to_str().unwrap(), "--epochs", "9", "--dump-config"], tmp.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--override"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("epochs = 2"));
}

#[test]
fn best_epoch_follows_the_selection_metric() {
    let tmp = tempfile::tempdir().unwrap();
    let opts = options(&tmp.path().join("teachers"));
    let first_max = |v: Vec<f64>| ardir_core::train::best_epoch_index(&v);
    for eps in [0.0, 0.1] {
        let mut c = micro(&tmp.path().join(format!("eps{eps}")));
        c.schedule.epochs = 4;
        c.attack.train.epsilon = eps;
        let splits = ingest_dataset(&c.dataset).unwrap();
        let m = train_run(&c, 1, &splits, &opts).unwrap();
        let want = if eps == 0.0 {
            first_max(m.metrics.iter().map(|r| r.test_clean_acc).collect())
        } else {
            first_max(m.metrics.iter().map(|r| r.test_robust_acc).collect())
        };
        assert_eq!(m.best_epoch, want, "eps {eps}");
    }
}
