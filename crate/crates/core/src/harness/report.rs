//! Result rows from run manifests and standalone checkpoint evaluation.

use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::data::Splits;
use super::run::{RunManifest, RunPaths};
use crate::attacks::{attack_transcript, pgd, TranscriptRow};
use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::distill::LossVariant;
use crate::error::{Error, Result};
use crate::eval::{evaluate, gap_report, AttackKind, EvalSettings, GapReport, ResultRow, ResultsTable, Split};
use crate::model::{Classifier, SmallCnn};
use crate::seed::{derive_seed, rng_for, stream};

fn row_labels(config: &ExperimentConfig) -> (String, String, Option<f64>, Option<f64>) {
    let variant = config.combo().map_or_else(|| "-".to_string(), |c| c.to_string());
    let (beta, t) = match config.loss.variant {
        LossVariant::Sat => (None, None),
        LossVariant::Ard => (None, Some(config.loss.temperature)),
        LossVariant::Ardir => (Some(config.loss.beta), Some(config.loss.temperature)),
    };
    (config.method_label(), variant, beta, t)
}

/// Result row for a finished run. Rows whose best checkpoint is missing
/// or whose final evaluation never ran are marked unavailable.
pub fn row_from_manifest(manifest_path: &Path) -> Result<ResultRow> {
    let m = RunManifest::load(manifest_path)?;
    let (method, variant, beta, temperature) = row_labels(&m.config);
    let dir = manifest_path.parent().unwrap_or(Path::new(""));
    let metrics = if dir.join(&m.best_checkpoint).exists() {
        m.final_evaluation.map(|f| f.test)
    } else {
        None
    };
    Ok(ResultRow {
        method,
        variant,
        beta,
        temperature,
        metrics,
        best_epoch: m.best_epoch,
    })
}

/// Finds every `manifest.json` below `root`, sorted.
pub fn find_manifests(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for e in entries {
            let p = e.map_err(|e| Error::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "manifest.json") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn report(manifests: &[PathBuf]) -> Result<ResultsTable> {
    Ok(ResultsTable {
        rows: manifests.iter().map(|p| row_from_manifest(p)).collect::<Result<_>>()?,
    })
}

/// Loads a checkpoint and checks it against the config's architecture.
pub fn load_for_config(path: &Path, config: &ExperimentConfig) -> Result<SmallCnn> {
    let ck = Checkpoint::load(path)?;
    let model = ck.to_model()?;
    let expected = SmallCnn::zeroed(config.architecture())?;
    let (have, want) = (model.tap_layers(), expected.tap_layers());
    if have.len() != want.len() {
        return Err(Error::TapMismatch {
            layer: have.len().min(want.len()),
            student: format!("{} taps in checkpoint", have.len()),
            teacher: format!("{} taps in descriptor", want.len()),
        });
    }
    if let Some(i) = (0..have.len()).find(|&i| have[i] != want[i]) {
        return Err(Error::TapMismatch {
            layer: i,
            student: format!("{:?}", have[i]),
            teacher: format!("{:?}", want[i]),
        });
    }
    if ck.architecture != config.architecture() {
        return Err(Error::Checkpoint(
            "checkpoint architecture differs from the config's model descriptor".into(),
        ));
    }
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct CheckpointEval {
    pub row: ResultRow,
    pub gap: Option<GapReport>,
}

/// Evaluates a checkpoint on the test split (and the train split when a
/// gap report is requested).
pub fn eval_checkpoint(
    model: &SmallCnn,
    config: &ExperimentConfig,
    splits: &Splits,
    attacks: &[AttackKind],
    seed: u64,
    with_gap: bool,
) -> Result<CheckpointEval> {
    let settings = EvalSettings {
        budget: config.attack.eval,
        restarts: config.attack.restarts,
        batch_size: config.evaluation.batch_size,
        seed,
    };
    let test = evaluate(model, &splits.test, Split::Test, attacks, &settings)?;
    let gap = if with_gap {
        let train = evaluate(model, &splits.train, Split::Train, attacks, &settings)?;
        Some(gap_report(&train, &test)?)
    } else {
        None
    };
    let (method, variant, beta, temperature) = row_labels(config);
    Ok(CheckpointEval {
        row: ResultRow {
            method,
            variant,
            beta,
            temperature,
            metrics: Some(test),
            best_epoch: None,
        },
        gap,
    })
}

/// Appends rows to a results CSV, writing the header only for a new file.
pub fn append_results(path: &Path, table: &ResultsTable) -> Result<()> {
    if !path.exists() {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        return table.write_csv(f);
    }
    let f = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    for r in &table.rows {
        w.write_record(r.cells())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-example PGD transcript on `data`.
pub fn pgd_transcript<M: Classifier>(
    model: &M,
    data: &Dataset,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<TranscriptRow>> {
    let mut rng = rng_for(derive_seed(seed, &[stream::EVAL]), &[AttackKind::Pgd.stream()]);
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(data.len());
    for chunk in indices.chunks(config.evaluation.batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let adv = pgd(model, &x, &y, &config.attack.eval, &mut rng)?;
        for mut r in attack_transcript(model, &x, &adv, &y)? {
            r.index = chunk[r.index];
            rows.push(r);
        }
    }
    Ok(rows)
}

/// Manifest paths of a run directory tree for every seed of a config.
pub fn manifests_for(config: &ExperimentConfig) -> Vec<PathBuf> {
    config
        .seeds
        .iter()
        .map(|&s| RunPaths::new(&config.output_dir, s).manifest())
        .collect()
}
