//! Grid sweeps over one config parameter, per seed and teacher combination.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{apply_overrides, ExperimentConfig, Override};
use super::data::{ingest_dataset, Splits};
use super::run::{train_run, RunManifest, RunOptions, RunPaths};
use crate::error::{Error, Result};
use crate::train::{TeacherCombo, TeacherConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepTeachers {
    #[serde(default)]
    pub clean: Option<String>,
    #[serde(default)]
    pub robust: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub schema_version: u32,
    /// Base experiment config, relative to the sweep file.
    pub base: PathBuf,
    /// Dotted config path, e.g. `loss.beta`.
    pub parameter: String,
    pub values: Vec<toml::Value>,
    /// Defaults to the base config's seeds.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Defaults to the base config's teacher combination.
    #[serde(default)]
    pub combos: Vec<TeacherCombo>,
    /// Registered teacher names per teacher kind.
    #[serde(default)]
    pub teachers: Option<SweepTeachers>,
    pub output_dir: PathBuf,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::config("sweep values must not be empty"));
        }
        if self.parameter.is_empty() {
            return Err(Error::config("sweep parameter must not be empty"));
        }
        if self.seeds.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(Error::config("sweep seeds must not be empty"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, ExperimentConfig)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: Self = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        let dir = path.parent().unwrap_or(Path::new(""));
        if spec.output_dir.is_relative() {
            spec.output_dir = dir.join(&spec.output_dir);
        }
        let base_path = dir.join(&spec.base);
        let (base, _) = super::config::load_config(&base_path, &[], false)?;
        Ok((spec, base))
    }
}

/// One (combo, value) grid point.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub combo: Option<TeacherCombo>,
    pub value: toml::Value,
    pub config: ExperimentConfig,
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Expands the grid into concrete configs with isolated output directories.
pub fn sweep_points(spec: &SweepSpec, base: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    spec.validate()?;
    let combos: Vec<Option<TeacherCombo>> = if spec.combos.is_empty() {
        vec![base.combo()]
    } else {
        spec.combos.iter().copied().map(Some).collect()
    };
    let mut points = Vec::new();
    for combo in combos {
        for value in &spec.values {
            let mut root = toml::Value::try_from(base).map_err(|e| Error::config(e.to_string()))?;
            apply_overrides(&mut root, &[Override::new(spec.parameter.clone(), value.clone())], true)?;
            let mut config: ExperimentConfig = root
                .try_into()
                .map_err(|e: toml::de::Error| Error::config(format!("sweep point {}: {e}", value_label(value))))?;
            if let Some(seeds) = &spec.seeds {
                config.seeds = seeds.clone();
            }
            let mut dir = spec.output_dir.clone();
            if let Some(c) = combo {
                let tc = TeacherConfig::from_combo(c);
                let t = config
                    .teacher
                    .as_mut()
                    .ok_or_else(|| Error::config("teacher combos need a base config with a [teacher] section"))?;
                t.model = tc.model_kind();
                t.data = tc.data_mode();
                if let Some(names) = &spec.teachers {
                    let name = match t.model {
                        crate::train::TeacherModelKind::Clean => &names.clean,
                        crate::train::TeacherModelKind::Robust => &names.robust,
                    };
                    if let Some(name) = name {
                        t.registered = Some(name.clone());
                        t.checkpoint = None;
                    }
                }
                dir = dir.join(c.to_string());
            }
            config.output_dir = dir.join(format!("{}={}", spec.parameter, value_label(value)));
            config.validate()?;
            points.push(SweepPoint {
                combo,
                value: value.clone(),
                config,
            });
        }
    }
    Ok(points)
}

/// Outcome of one (point, seed) run.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub point: usize,
    pub seed: u64,
    pub outcome: std::result::Result<RunManifest, String>,
}

/// Test PGD accuracy of a finished run: the final evaluation if present,
/// otherwise the best epoch's probe value.
pub fn robust_accuracy(m: &RunManifest) -> Option<f64> {
    m.final_evaluation
        .as_ref()
        .and_then(|f| f.test.pgd)
        .or_else(|| m.best_epoch.map(|e| m.metrics[e].test_robust_acc))
}

pub fn clean_accuracy(m: &RunManifest) -> Option<f64> {
    m.final_evaluation
        .as_ref()
        .map(|f| f.test.clean)
        .or_else(|| m.best_epoch.map(|e| m.metrics[e].test_clean_acc))
}

/// Aggregate over seeds at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub combo: String,
    pub parameter: String,
    pub value: String,
    pub runs: usize,
    pub failures: usize,
    pub robust_mean: Option<f64>,
    pub robust_std: Option<f64>,
    pub clean_mean: Option<f64>,
    pub clean_std: Option<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

pub fn summarize(spec: &SweepSpec, points: &[SweepPoint], runs: &[SweepRun]) -> Vec<SummaryRow> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mine: Vec<&SweepRun> = runs.iter().filter(|r| r.point == i).collect();
            let ok: Vec<&RunManifest> = mine.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let robust: Vec<f64> = ok.iter().filter_map(|m| robust_accuracy(m)).collect();
            let clean: Vec<f64> = ok.iter().filter_map(|m| clean_accuracy(m)).collect();
            let r = mean_std(&robust);
            let c = mean_std(&clean);
            SummaryRow {
                combo: p.combo.map_or_else(|| "-".to_string(), |c| c.to_string()),
                parameter: spec.parameter.clone(),
                value: value_label(&p.value),
                runs: mine.len(),
                failures: mine.len() - ok.len(),
                robust_mean: r.map(|v| v.0),
                robust_std: r.map(|v| v.1),
                clean_mean: c.map(|v| v.0),
                clean_std: c.map(|v| v.1),
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<summary>", e))
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub points: Vec<SweepPoint>,
    pub runs: Vec<SweepRun>,
    pub summary: Vec<SummaryRow>,
    pub summary_csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Runs every (point, seed). A failing run is recorded and the sweep moves
/// on.
pub fn run_sweep(spec: &SweepSpec, base: &ExperimentConfig, options: &RunOptions) -> Result<SweepOutcome> {
    let points = sweep_points(spec, base)?;
    let mut cache: BTreeMap<String, Splits> = BTreeMap::new();
    let mut runs = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let key = serde_json::to_string(&p.config.dataset)?;
        if !cache.contains_key(&key) {
            cache.insert(key.clone(), ingest_dataset(&p.config.dataset)?);
        }
        let splits = &cache[&key];
        for &seed in &p.config.seeds {
            let outcome = train_run(&p.config, seed, splits, options).map_err(|e| e.to_string());
            if let Err(msg) = &outcome {
                eprintln!("sweep point {} seed {seed} failed: {msg}", p.config.output_dir.display());
            }
            runs.push(SweepRun { point: i, seed, outcome });
        }
    }
    let summary = summarize(spec, &points, &runs);
    std::fs::create_dir_all(&spec.output_dir).map_err(|e| Error::io(&spec.output_dir, e))?;
    let summary_csv = spec.output_dir.join("summary.csv");
    let file = std::fs::File::create(&summary_csv).map_err(|e| Error::io(&summary_csv, e))?;
    write_summary_csv(&summary, file)?;
    write_failures(&spec.output_dir, &points, &runs)?;
    let plots = super::plot::sweep_plots(&summary, &spec.output_dir)?;
    Ok(SweepOutcome {
        points,
        runs,
        summary,
        summary_csv,
        plots,
    })
}

fn write_failures(dir: &Path, points: &[SweepPoint], runs: &[SweepRun]) -> Result<()> {
    let path = dir.join("failures.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["run_dir", "seed", "error"])?;
    for r in runs {
        if let Err(msg) = &r.outcome {
            let run_dir = RunPaths::new(&points[r.point].config.output_dir, r.seed).dir;
            w.write_record([run_dir.display().to_string(), r.seed.to_string(), msg.clone()])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
