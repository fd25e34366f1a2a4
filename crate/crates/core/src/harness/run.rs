//! One training run per (config, seed): artifacts, resume state and the
//! run manifest.
//!
//! Layout under `<output_dir>/seed-<seed>/`:
//! `manifest.json`, `metrics.csv`, `best.ckpt.json`, `final.ckpt.json` and
//! `state.json` (rewritten after every epoch, used to resume).

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{ingest_dataset, Splits};
use super::registry::TeacherRegistry;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{evaluate, gap_report, EpochMetrics, EvalSettings, GapReport, Split};
use crate::model::{Classifier, SmallCnn};
use crate::optim::Sgd;
use crate::seed::{derive_seed, stream};
use crate::train::{run_training, BestEpoch, EpochRecord, Teacher, TeacherModelKind, TrainOptions, TrainRunState};

pub const MANIFEST_FORMAT: &str = "ardir-run-manifest";
pub const MANIFEST_VERSION: u32 = 1;
const STATE_FORMAT: &str = "ardir-run-state";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub run: u64,
    pub init: u64,
    pub final_eval: u64,
}

impl RunSeeds {
    pub fn new(run: u64) -> Self {
        Self {
            run,
            init: derive_seed(run, &[stream::INIT]),
            final_eval: derive_seed(run, &[stream::EVAL, 1]),
        }
    }
}

/// Best-checkpoint accuracies on both splits with the configured attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEvaluation {
    pub train: EpochMetrics,
    pub test: EpochMetrics,
    pub gap: GapReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub method: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seeds: RunSeeds,
    pub dataset_hash: String,
    pub teacher_checkpoint_id: Option<String>,
    pub metrics: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: String,
    pub final_checkpoint: String,
    pub metrics_csv: String,
    pub final_evaluation: Option<FinalEvaluation>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: not a version {MANIFEST_VERSION} run manifest",
                path.display()
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(output_dir: &Path, seed: u64) -> Self {
        Self {
            dir: output_dir.join(format!("seed-{seed}")),
        }
    }
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt.json")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("final.ckpt.json")
    }
    pub fn state(&self) -> PathBuf {
        self.dir.join("state.json")
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    // Write-then-rename so an interrupted run never leaves a torn file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_metrics_csv<W: Write>(rows: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "epoch",
            "lr",
            "train_clean_acc",
            "train_robust_acc",
            "test_clean_acc",
            "test_robust_acc",
            "kl_term_mean",
            "lpips_term_mean",
            "replacement_rate",
        ])?;
    }
    w.flush().map_err(|e| Error::io("<metrics>", e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResumeState {
    format: String,
    config_hash: String,
    seed: u64,
    epoch: usize,
    student: Checkpoint,
    optimizer: Sgd,
    history: Vec<EpochRecord>,
    best: Option<BestEpoch>,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub registry: TeacherRegistry,
    /// Continue from `state.json` when its config hash matches.
    pub resume: bool,
    /// Stop after this many epochs in this invocation (for testing resume).
    pub max_epochs: Option<usize>,
    pub quiet: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            registry: TeacherRegistry::from_env(),
            resume: true,
            max_epochs: None,
            quiet: true,
        }
    }
}

/// Teacher model and its checkpoint id, or `None` for SAT configs.
pub fn load_teacher(config: &ExperimentConfig, registry: &TeacherRegistry) -> Result<Option<(SmallCnn, String)>> {
    let Some(spec) = &config.teacher else {
        return Ok(None);
    };
    if !config.loss.uses_teacher() {
        return Ok(None);
    }
    let ck = match (&spec.checkpoint, &spec.registered) {
        (Some(path), _) => Checkpoint::load(path)?,
        (None, Some(name)) => {
            let (entry, ck) = registry.resolve(name)?;
            if entry.kind != spec.model {
                return Err(Error::config(format!(
                    "teacher {name:?} is registered as {:?} but the config asks for {:?}",
                    entry.kind, spec.model
                )));
            }
            ck
        }
        (None, None) => return Err(Error::config("teacher needs `checkpoint` or `registered`")),
    };
    let id = ck.id()?;
    Ok(Some((ck.to_model()?, id)))
}

/// Trains one seed of `config`, writing every artifact. Returns the manifest.
pub fn train_run(config: &ExperimentConfig, seed: u64, splits: &Splits, options: &RunOptions) -> Result<RunManifest> {
    config.validate()?;
    let paths = RunPaths::new(&config.output_dir, seed);
    let seeds = RunSeeds::new(seed);
    let config_hash = config.hash();
    let teacher = load_teacher(config, &options.registry)?;
    let teacher_config = config.teacher_config()?;

    let mut state = TrainRunState::new(
        SmallCnn::new(config.architecture(), seeds.init)?,
        &config.schedule,
        seed,
    );
    if options.resume && paths.state().exists() {
        let text = std::fs::read_to_string(paths.state()).map_err(|e| Error::io(paths.state(), e))?;
        let saved: ResumeState = serde_json::from_str(&text)?;
        if saved.format != STATE_FORMAT || saved.config_hash != config_hash || saved.seed != seed {
            return Err(Error::config(format!(
                "{} belongs to a different config; remove it or pass --fresh",
                paths.state().display()
            )));
        }
        state.student = saved.student.to_model()?;
        state.optimizer = saved.optimizer;
        state.epoch = saved.epoch;
        state.history = saved.history;
        state.best = saved.best;
    }

    let train_options = TrainOptions {
        train_budget: config.attack.train,
        eval_budget: config.attack.eval,
        schedule_seed: seed,
        train_eval_samples: config.evaluation.train_samples,
        test_eval_samples: config.evaluation.test_samples,
        eval_batch_size: config.evaluation.batch_size,
        augment: config.augment,
    };
    let mut schedule = config.schedule.clone();
    if let Some(cap) = options.max_epochs {
        schedule.epochs = schedule.epochs.min(state.epoch + cap);
    }

    let teacher_ref = teacher
        .as_ref()
        .zip(teacher_config)
        .map(|((model, _), tc)| Teacher { model, config: tc });
    let quiet = options.quiet;
    let mut save_epoch = |s: &TrainRunState<SmallCnn>| -> Result<()> {
        let mut csv = Vec::new();
        write_metrics_csv(&s.history, &mut csv)?;
        write_file(&paths.metrics(), &csv)?;
        let resume = ResumeState {
            format: STATE_FORMAT.into(),
            config_hash: config_hash.clone(),
            seed,
            epoch: s.epoch,
            student: Checkpoint::from_model(&s.student, s.epoch, seed),
            optimizer: s.optimizer.clone(),
            history: s.history.clone(),
            best: s.best.clone(),
        };
        write_file(&paths.state(), serde_json::to_string(&resume)?.as_bytes())?;
        if !quiet {
            let r = s.history.last().expect("epoch recorded");
            eprintln!(
                "[{} seed {seed}] epoch {:>3} lr {:.4} train {:.3}/{:.3} test {:.3}/{:.3}",
                config.name, r.epoch, r.lr, r.train_clean_acc, r.train_robust_acc, r.test_clean_acc, r.test_robust_acc
            );
        }
        Ok(())
    };
    run_training(
        &mut state,
        teacher_ref.as_ref(),
        &config.loss,
        &splits.train,
        &splits.test,
        &schedule,
        &train_options,
        &mut save_epoch,
    )?;

    let best_model = state.best_student().unwrap_or_else(|| state.student.clone());
    let best_epoch = state.best.as_ref().map(|b| b.epoch);
    Checkpoint::from_model(&state.student, state.epoch, seed).save(paths.last())?;
    Checkpoint::from_model(&best_model, best_epoch.map_or(0, |e| e + 1), seed).save(paths.best())?;

    let finished = state.epoch >= config.schedule.epochs;
    let final_evaluation = if finished {
        Some(final_evaluation(&best_model, splits, config, seeds.final_eval)?)
    } else {
        None
    };
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        name: config.name.clone(),
        method: config.method_label(),
        config: config.clone(),
        config_hash,
        seeds,
        dataset_hash: splits.content_hash(),
        teacher_checkpoint_id: teacher.map(|(_, id)| id),
        metrics: state.history.clone(),
        best_epoch,
        best_checkpoint: "best.ckpt.json".into(),
        final_checkpoint: "final.ckpt.json".into(),
        metrics_csv: "metrics.csv".into(),
        final_evaluation,
    };
    manifest.save(&paths.manifest())?;
    Ok(manifest)
}

/// Evaluates `model` on both splits with the config's final attacks.
pub fn final_evaluation<M: Classifier>(
    model: &M,
    splits: &Splits,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<FinalEvaluation> {
    let settings = EvalSettings {
        budget: config.attack.eval,
        restarts: config.attack.restarts,
        batch_size: config.evaluation.batch_size,
        seed,
    };
    let attacks = &config.evaluation.final_attacks;
    let train = evaluate(model, &splits.train, Split::Train, attacks, &settings)?;
    let test = evaluate(model, &splits.test, Split::Test, attacks, &settings)?;
    let gap = gap_report(&train, &test)?;
    Ok(FinalEvaluation { train, test, gap })
}

/// Trains every seed of `config`; returns the manifest paths.
pub fn train_all(config: &ExperimentConfig, options: &RunOptions) -> Result<Vec<PathBuf>> {
    let splits = ingest_dataset(&config.dataset)?;
    config
        .seeds
        .iter()
        .map(|&seed| {
            train_run(config, seed, &splits, options)?;
            Ok(RunPaths::new(&config.output_dir, seed).manifest())
        })
        .collect()
}

/// Which teacher kind a config trains when used with `make-teacher`.
pub fn trained_kind(config: &ExperimentConfig) -> TeacherModelKind {
    if config.attack.train.epsilon == 0.0 {
        TeacherModelKind::Clean
    } else {
        TeacherModelKind::Robust
    }
}
