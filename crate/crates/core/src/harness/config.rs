//! Experiment configuration: one TOML file per run, schema-versioned, with
//! unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::DatasetSpec;
use crate::attacks::PerturbationBudget;
use crate::distill::{ArdirLossConfig, LossVariant};
use crate::error::{Error, Result};
use crate::eval::AttackKind;
use crate::model::{CnnArchitecture, ConvBlock, InputShape};
use crate::optim::{Milestone, TrainingSchedule};
use crate::train::{TeacherCombo, TeacherConfig, TeacherDataMode, TeacherModelKind};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub blocks: Vec<ConvBlock>,
    /// Tapped block indices; empty taps every block.
    #[serde(default)]
    pub taps: Vec<usize>,
    #[serde(default)]
    pub input_mean: Vec<f64>,
    #[serde(default)]
    pub input_std: Vec<f64>,
}

impl ModelSpec {
    /// Three blocks of 8, 16 and 16 channels, pooling after the first two.
    pub fn toy() -> Self {
        Self {
            blocks: vec![
                ConvBlock { channels: 8, pool: true },
                ConvBlock { channels: 16, pool: true },
                ConvBlock { channels: 16, pool: false },
            ],
            taps: Vec::new(),
            input_mean: Vec::new(),
            input_std: Vec::new(),
        }
    }

    pub fn architecture(&self, input: InputShape, num_classes: usize) -> CnnArchitecture {
        CnnArchitecture {
            input,
            num_classes,
            blocks: self.blocks.clone(),
            taps: self.taps.clone(),
            input_mean: self.input_mean.clone(),
            input_std: self.input_std.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub train: PerturbationBudget,
    pub eval: PerturbationBudget,
    /// Restarts for the multi-restart PGD column.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_restarts() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub model: TeacherModelKind,
    pub data: TeacherDataMode,
    /// Checkpoint path, relative to the config file.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Name in the teacher registry, used when `checkpoint` is absent.
    #[serde(default)]
    pub registered: Option<String>,
}

impl TeacherSpec {
    pub fn config(&self) -> Result<TeacherConfig> {
        TeacherConfig::new(self.model, self.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSpec {
    /// Train examples evaluated after every epoch; 0 means all.
    #[serde(default = "default_probe")]
    pub train_samples: usize,
    /// Test examples evaluated after every epoch; 0 means all.
    #[serde(default)]
    pub test_samples: usize,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    /// Attacks run on the best checkpoint when training finishes.
    #[serde(default = "default_final_attacks")]
    pub final_attacks: Vec<AttackKind>,
}

fn default_probe() -> usize {
    250
}
fn default_eval_batch() -> usize {
    250
}
fn default_final_attacks() -> Vec<AttackKind> {
    vec![AttackKind::Fgsm, AttackKind::Pgd, AttackKind::PgdMr]
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self {
            train_samples: default_probe(),
            test_samples: 0,
            batch_size: default_eval_batch(),
            final_attacks: default_final_attacks(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub attack: AttackSpec,
    pub schedule: TrainingSchedule,
    pub loss: ArdirLossConfig,
    #[serde(default)]
    pub teacher: Option<TeacherSpec>,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
    /// Random crop and horizontal flip on training batches.
    #[serde(default)]
    pub augment: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

impl ExperimentConfig {
    /// Toy-scale SAT run: 30 epochs, ε = 0.1, PGD k = 10 for training and
    /// k = 20 for evaluation, lr divided by 10 at epochs 15 and 22.
    pub fn toy_sat() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "toy-sat".into(),
            seeds: default_seeds(),
            output_dir: PathBuf::from("runs/toy-sat"),
            dataset: DatasetSpec::Toy {
                classes: 4,
                size: 8,
                train: 1000,
                test: 2000,
                noise: 0.1,
                seed: 0,
            },
            model: ModelSpec::toy(),
            attack: AttackSpec {
                train: PerturbationBudget {
                    epsilon: 0.1,
                    step_size: 0.025,
                    steps: 10,
                    random_init: true,
                },
                eval: PerturbationBudget {
                    epsilon: 0.1,
                    step_size: 0.025,
                    steps: 20,
                    random_init: true,
                },
                restarts: default_restarts(),
            },
            schedule: TrainingSchedule {
                epochs: 30,
                batch_size: 32,
                learning_rate: 0.1,
                momentum: 0.9,
                weight_decay: 5e-4,
                milestones: vec![Milestone { epoch: 15, divisor: 10.0 }, Milestone { epoch: 22, divisor: 10.0 }],
            },
            loss: ArdirLossConfig::sat(),
            teacher: None,
            evaluation: EvaluationSpec {
                test_samples: 500,
                ..EvaluationSpec::default()
            },
            augment: false,
        }
    }

    /// Toy-scale output + representation distillation from a robust teacher
    /// on clean data.
    pub fn toy_ardir(beta: f64, temperature: f64) -> Self {
        Self {
            name: "toy-ardir".into(),
            output_dir: PathBuf::from("runs/toy-ardir"),
            loss: ArdirLossConfig::ardir(beta, temperature),
            teacher: Some(TeacherSpec {
                model: TeacherModelKind::Robust,
                data: TeacherDataMode::Clean,
                checkpoint: None,
                registered: Some("toy-robust".into()),
            }),
            ..Self::toy_sat()
        }
    }

    pub fn input_shape(&self) -> InputShape {
        match &self.dataset {
            DatasetSpec::Toy { size, .. } => InputShape::new(1, *size, *size),
            _ => InputShape::new(3, 32, 32),
        }
    }

    pub fn architecture(&self) -> CnnArchitecture {
        self.model.architecture(self.input_shape(), self.dataset.num_classes())
    }

    pub fn teacher_config(&self) -> Result<Option<TeacherConfig>> {
        self.teacher.as_ref().map(TeacherSpec::config).transpose()
    }

    pub fn combo(&self) -> Option<TeacherCombo> {
        self.teacher_config().ok().flatten().map(|t| t.combo())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.name.trim().is_empty() {
            return Err(Error::config("name must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        self.dataset.validate()?;
        self.architecture().validate()?;
        self.attack.train.validate()?;
        self.attack.eval.validate()?;
        if self.attack.restarts == 0 {
            return Err(Error::config("attack.restarts must be at least 1"));
        }
        self.schedule.validate()?;
        self.loss.validate()?;
        if self.evaluation.batch_size == 0 {
            return Err(Error::config("evaluation.batch_size must be positive"));
        }
        match (&self.teacher, self.loss.uses_teacher()) {
            (None, true) => Err(Error::config("loss variant needs a [teacher] section")),
            (Some(t), true) => {
                t.config()?;
                if t.checkpoint.is_none() && t.registered.is_none() {
                    return Err(Error::config("teacher needs `checkpoint` or `registered`"));
                }
                Ok(())
            }
            (Some(_), false) => Err(Error::config("[teacher] given but loss variant is sat")),
            (None, false) => Ok(()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Human-readable method label for result tables.
    pub fn method_label(&self) -> String {
        let base = match self.loss.variant {
            LossVariant::Sat if self.attack.train.epsilon == 0.0 => "Clean",
            LossVariant::Sat => "SAT",
            LossVariant::Ard => "ARD",
            LossVariant::Ardir => "ARDIR",
        };
        match self.combo() {
            Some(c) => format!("{base} ({c})"),
            None => base.to_string(),
        }
    }
}

/// One `--set`-style override: a dotted path and a TOML value.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: String,
    pub value: toml::Value,
}

impl Override {
    /// Parses `a.b.c=value`; the value is read as TOML and falls back to a
    /// plain string.
    pub fn parse(s: &str) -> Result<Self> {
        let (path, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{s}` must look like key=value")))?;
        let path = path.trim();
        if path.is_empty() {
            return Err(Error::config(format!("override `{s}` has an empty key")));
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        Ok(Self {
            path: path.to_string(),
            value,
        })
    }

    pub fn new(path: impl Into<String>, value: impl Into<toml::Value>) -> Self {
        Self {
            path: path.into(),
            value: value.into(),
        }
    }
}

/// Outcome of applying overrides to a parsed config file.
#[derive(Debug, Default)]
pub struct Applied {
    /// Overrides ignored because the file already sets the key.
    pub ignored: Vec<String>,
}

fn lookup<'a>(root: &'a toml::Value, path: &str) -> Option<&'a toml::Value> {
    path.split('.').try_fold(root, |v, k| v.get(k))
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for k in &keys[..keys.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{path}`: `{k}` is not a table")))?;
        cur = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| Error::config(format!("`{path}`: parent is not a table")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Applies overrides to a raw config value. A key already present in the
/// file keeps its file value unless `force` is set.
pub fn apply_overrides(root: &mut toml::Value, overrides: &[Override], force: bool) -> Result<Applied> {
    let mut applied = Applied::default();
    for o in overrides {
        if !force && lookup(root, &o.path).is_some() {
            applied.ignored.push(o.path.clone());
            continue;
        }
        set_path(root, &o.path, o.value.clone())?;
    }
    Ok(applied)
}

/// Reads a config file, applies overrides and resolves relative paths
/// against the file's directory.
pub fn load_config(path: &Path, overrides: &[Override], force: bool) -> Result<(ExperimentConfig, Applied)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut root: toml::Value = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let applied = apply_overrides(&mut root, overrides, force)?;
    let mut config: ExperimentConfig = root
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    config.output_dir = resolve(base, &config.output_dir);
    if let Some(t) = config.teacher.as_mut() {
        t.checkpoint = t.checkpoint.as_ref().map(|c| resolve(base, c));
    }
    config.validate()?;
    Ok((config, applied))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
