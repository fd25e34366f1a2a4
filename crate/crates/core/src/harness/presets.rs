//! Named configs shipped with the tool.

use std::path::PathBuf;

use super::config::{AttackSpec, EvaluationSpec, ExperimentConfig, ModelSpec, TeacherSpec, SCHEMA_VERSION};
use super::data::DatasetSpec;
use crate::attacks::PerturbationBudget;
use crate::distill::ArdirLossConfig;
use crate::error::{Error, Result};
use crate::model::ConvBlock;
use crate::optim::TrainingSchedule;
use crate::train::{TeacherDataMode, TeacherModelKind};

pub const PRESETS: [&str; 8] = [
    "toy-clean",
    "toy-sat",
    "toy-ard",
    "toy-ardir",
    "cifar10-sat",
    "cifar10-ardir-rc",
    "svhn-sat",
    "svhn-ardir-rc",
];

fn named(mut c: ExperimentConfig, name: &str) -> ExperimentConfig {
    c.name = name.to_string();
    c.output_dir = PathBuf::from("runs").join(name);
    c
}

fn registered(model: TeacherModelKind, name: &str) -> Option<TeacherSpec> {
    Some(TeacherSpec {
        model,
        data: TeacherDataMode::Clean,
        checkpoint: None,
        registered: Some(name.to_string()),
    })
}

fn full_scale(dataset: DatasetSpec, train: PerturbationBudget, eval: PerturbationBudget) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        name: String::new(),
        seeds: vec![1, 2, 3],
        output_dir: PathBuf::new(),
        dataset,
        model: ModelSpec {
            blocks: vec![
                ConvBlock { channels: 32, pool: true },
                ConvBlock { channels: 64, pool: true },
                ConvBlock { channels: 128, pool: true },
            ],
            taps: Vec::new(),
            input_mean: Vec::new(),
            input_std: Vec::new(),
        },
        attack: AttackSpec {
            train,
            eval,
            restarts: 5,
        },
        schedule: TrainingSchedule::default(),
        loss: ArdirLossConfig::sat(),
        teacher: None,
        evaluation: EvaluationSpec {
            train_samples: 1000,
            test_samples: 0,
            ..EvaluationSpec::default()
        },
        augment: false,
    }
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let toy = ExperimentConfig::toy_sat;
    let cifar = || {
        full_scale(
            DatasetSpec::Cifar10 {
                train_limit: None,
                test_limit: None,
                expected_hash: None,
            },
            PerturbationBudget::cifar10_train(),
            PerturbationBudget::cifar10_eval(),
        )
    };
    let svhn = || {
        full_scale(
            DatasetSpec::Svhn {
                train_limit: None,
                test_limit: None,
                expected_hash: None,
            },
            PerturbationBudget::svhn_train(),
            PerturbationBudget::svhn_eval(),
        )
    };
    let c = match name {
        "toy-clean" => {
            let mut c = toy();
            c.attack.train.epsilon = 0.0;
            c
        }
        "toy-sat" => toy(),
        "toy-ard" => ExperimentConfig {
            loss: ArdirLossConfig::ard(1.0),
            ..ExperimentConfig::toy_ardir(0.0, 1.0)
        },
        "toy-ardir" => ExperimentConfig::toy_ardir(0.6, 1.0),
        "cifar10-sat" => cifar(),
        "cifar10-ardir-rc" => ExperimentConfig {
            loss: ArdirLossConfig::ardir(0.6, 1.0),
            teacher: registered(TeacherModelKind::Robust, "cifar10-robust"),
            ..cifar()
        },
        "svhn-sat" => svhn(),
        "svhn-ardir-rc" => ExperimentConfig {
            loss: ArdirLossConfig::ardir(0.8, 1.0),
            teacher: registered(TeacherModelKind::Robust, "svhn-robust"),
            ..svhn()
        },
        other => {
            return Err(Error::config(format!(
                "unknown preset {other:?}; available: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(named(c, name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::LossVariant;

    #[test]
    fn every_preset_validates() {
        for name in PRESETS {
            let c = preset(name).unwrap();
            c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(c.name, name);
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn cifar_preset_is_the_best_reported_setting() {
        let c = preset("cifar10-ardir-rc").unwrap();
        assert_eq!(c.loss.variant, LossVariant::Ardir);
        assert_eq!((c.loss.beta, c.loss.temperature), (0.6, 1.0));
        assert_eq!(c.combo(), Some(crate::train::TeacherCombo::RC));
        assert_eq!(c.schedule.epochs, 200);
        assert_eq!(c.attack.train.epsilon, 8.0 / 255.0);
        assert_eq!(preset("svhn-ardir-rc").unwrap().loss.beta, 0.8);
    }
}
