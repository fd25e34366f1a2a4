//! Training loops: standard adversarial training, output distillation and
//! output + representation distillation, with teacher combinations.
//!
//! One batch of the distillation loop runs, in order:
//! 1. PGD against the current student, giving `x + η`;
//! 2. teacher data: `x` for CC/RC, PGD against the teacher for RA;
//! 3. the frozen teacher's logits and features on the teacher data, with
//!    wrong teacher predictions replaced by the one-hot label;
//! 4. the configured objective;
//! 5. one SGD step on the student.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, PerturbationBudget};
use crate::dataset::{augment_crop_flip, Dataset};
use crate::distill::{objective, ArdirLossConfig, LossVariant, ObjectiveOutput, TeacherSignal};
use crate::error::{Error, Result};
use crate::eval::{evaluate, AttackKind, EvalSettings, Split};
use crate::model::{check_tap_compat, Classifier};
use crate::optim::{Sgd, TrainingSchedule};
use crate::seed::{derive_seed, rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherModelKind {
    Clean,
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherDataMode {
    Clean,
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TeacherCombo {
    /// Clean model, clean data.
    CC,
    /// Robust model, clean data.
    RC,
    /// Robust model, adversarial data.
    RA,
}

impl std::fmt::Display for TeacherCombo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TeacherCombo::CC => "CC",
            TeacherCombo::RC => "RC",
            TeacherCombo::RA => "RA",
        };
        f.write_str(s)
    }
}

/// Teacher model kind and teacher data mode. The clean-model /
/// adversarial-data pairing cannot be constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTeacherConfig", into = "RawTeacherConfig")]
pub struct TeacherConfig {
    model: TeacherModelKind,
    data: TeacherDataMode,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTeacherConfig {
    model: TeacherModelKind,
    data: TeacherDataMode,
}

impl TryFrom<RawTeacherConfig> for TeacherConfig {
    type Error = Error;

    fn try_from(raw: RawTeacherConfig) -> Result<Self> {
        TeacherConfig::new(raw.model, raw.data)
    }
}

impl From<TeacherConfig> for RawTeacherConfig {
    fn from(c: TeacherConfig) -> Self {
        Self {
            model: c.model,
            data: c.data,
        }
    }
}

impl TeacherConfig {
    pub fn new(model: TeacherModelKind, data: TeacherDataMode) -> Result<Self> {
        if model == TeacherModelKind::Clean && data == TeacherDataMode::Adversarial {
            return Err(Error::config(
                "clean teacher model with adversarial teacher data (CA) is not supported",
            ));
        }
        Ok(Self { model, data })
    }

    pub fn from_combo(combo: TeacherCombo) -> Self {
        let (model, data) = match combo {
            TeacherCombo::CC => (TeacherModelKind::Clean, TeacherDataMode::Clean),
            TeacherCombo::RC => (TeacherModelKind::Robust, TeacherDataMode::Clean),
            TeacherCombo::RA => (TeacherModelKind::Robust, TeacherDataMode::Adversarial),
        };
        Self { model, data }
    }

    pub fn combo(&self) -> TeacherCombo {
        match (self.model, self.data) {
            (TeacherModelKind::Clean, _) => TeacherCombo::CC,
            (TeacherModelKind::Robust, TeacherDataMode::Clean) => TeacherCombo::RC,
            (TeacherModelKind::Robust, TeacherDataMode::Adversarial) => TeacherCombo::RA,
        }
    }

    pub fn model_kind(&self) -> TeacherModelKind {
        self.model
    }

    pub fn data_mode(&self) -> TeacherDataMode {
        self.data
    }
}

/// Teacher data for one batch: `x` itself, or PGD against the teacher for
/// adversarial teacher data.
pub fn resolve_teacher_data<T: Classifier, R: rand::Rng + ?Sized>(
    x: &Array4<f64>,
    y: &[usize],
    config: TeacherConfig,
    teacher: &T,
    budget: &PerturbationBudget,
    rng: &mut R,
) -> Result<Array4<f64>> {
    match config.data_mode() {
        TeacherDataMode::Clean => Ok(x.clone()),
        TeacherDataMode::Adversarial => pgd(teacher, x, y, budget, rng),
    }
}

/// Attack seeds for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSeeds {
    pub student_attack: u64,
    pub teacher_attack: u64,
}

impl BatchSeeds {
    pub fn derive(run_seed: u64, epoch: usize, batch: usize) -> Self {
        Self {
            student_attack: derive_seed(run_seed, &[stream::STUDENT_ATTACK, epoch as u64, batch as u64]),
            teacher_attack: derive_seed(run_seed, &[stream::TEACHER_ATTACK, epoch as u64, batch as u64]),
        }
    }
}

/// Everything produced for one batch before the parameter update.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    pub x_adv: Array4<f64>,
    pub x_teacher: Option<Array4<f64>>,
    pub signal: Option<TeacherSignal>,
    pub output: ObjectiveOutput,
}

/// Teacher handle passed to the loops.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a, T> {
    pub model: &'a T,
    pub config: TeacherConfig,
}

fn check_teacher<M: Classifier, T: Classifier>(
    student: &M,
    teacher: Option<&Teacher<'_, T>>,
    loss: &ArdirLossConfig,
) -> Result<()> {
    loss.validate()?;
    match (loss.uses_teacher(), teacher) {
        (true, None) => Err(Error::config("distillation objective requires a teacher")),
        (true, Some(t)) => {
            if t.model.input_shape() != student.input_shape() || t.model.num_classes() != student.num_classes() {
                return Err(Error::config("teacher and student disagree on input shape or class count"));
            }
            if loss.variant == LossVariant::Ardir {
                check_tap_compat(student.tap_layers(), t.model.tap_layers())?;
            }
            Ok(())
        }
        (false, _) => Ok(()),
    }
}

/// Steps 1-4 for one batch; the student is not modified.
pub fn batch_objective<M: Classifier, T: Classifier>(
    student: &M,
    teacher: Option<&Teacher<'_, T>>,
    loss: &ArdirLossConfig,
    x: &Array4<f64>,
    y: &[usize],
    budget: &PerturbationBudget,
    seeds: BatchSeeds,
) -> Result<BatchTrace> {
    let mut student_rng = ChaCha8Rng::seed_from_u64(seeds.student_attack);
    let x_adv = pgd(student, x, y, budget, &mut student_rng)?;
    let (x_teacher, signal) = match (loss.uses_teacher(), teacher) {
        (true, Some(t)) => {
            let mut teacher_rng = ChaCha8Rng::seed_from_u64(seeds.teacher_attack);
            let x_t = resolve_teacher_data(x, y, t.config, t.model, budget, &mut teacher_rng)?;
            let signal = TeacherSignal::compute(t.model, &x_t, y, loss)?;
            (Some(x_t), Some(signal))
        }
        (true, None) => return Err(Error::config("distillation objective requires a teacher")),
        (false, _) => (None, None),
    };
    let output = objective(student, x, &x_adv, y, signal.as_ref(), loss)?;
    Ok(BatchTrace {
        x_adv,
        x_teacher,
        signal,
        output,
    })
}

/// One metrics row per completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_clean_acc: f64,
    pub train_robust_acc: f64,
    pub test_clean_acc: f64,
    pub test_robust_acc: f64,
    pub kl_term_mean: f64,
    pub lpips_term_mean: f64,
    pub replacement_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestEpoch {
    pub epoch: usize,
    /// Test PGD accuracy, or test clean accuracy for a zero training budget.
    pub score: f64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub train_budget: PerturbationBudget,
    pub eval_budget: PerturbationBudget,
    pub schedule_seed: u64,
    /// Examples of the train split used for per-epoch train metrics; 0 means
    /// the whole split.
    pub train_eval_samples: usize,
    /// Examples of the test split used per epoch; 0 means the whole split.
    pub test_eval_samples: usize,
    pub eval_batch_size: usize,
    pub augment: bool,
}

impl TrainOptions {
    pub fn new(train_budget: PerturbationBudget, eval_budget: PerturbationBudget, seed: u64) -> Self {
        Self {
            train_budget,
            eval_budget,
            schedule_seed: seed,
            train_eval_samples: 0,
            test_eval_samples: 0,
            eval_batch_size: 250,
            augment: false,
        }
    }
}

/// Mutable state of a training run. `history.len()` equals `epoch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunState<M> {
    pub student: M,
    pub optimizer: Sgd,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestEpoch>,
}

impl<M: Classifier> TrainRunState<M> {
    pub fn new(student: M, schedule: &TrainingSchedule, seed: u64) -> Self {
        let optimizer = Sgd::new(schedule, student.num_params());
        Self {
            student,
            optimizer,
            epoch: 0,
            seed,
            history: Vec::new(),
            best: None,
        }
    }

    /// Student with the best-epoch parameters, if any epoch completed.
    pub fn best_student(&self) -> Option<M>
    where
        M: Clone,
    {
        self.best.as_ref().map(|b| {
            let mut m = self.student.clone();
            m.params_mut().copy_from_slice(&b.params);
            m
        })
    }
}

fn fixed_subsample(n: usize, k: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    if k == 0 || k >= n {
        return idx;
    }
    idx.shuffle(&mut rng_for(seed, &[stream::SUBSAMPLE]));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Runs epochs `state.epoch..schedule.epochs`, calling `on_epoch` after each.
/// The best epoch is the first with the highest test PGD accuracy; runs
/// with a zero training budget use test clean accuracy instead.
#[allow(clippy::too_many_arguments)]
pub fn run_training<M: Classifier, T: Classifier>(
    state: &mut TrainRunState<M>,
    teacher: Option<&Teacher<'_, T>>,
    loss: &ArdirLossConfig,
    train: &Dataset,
    test: &Dataset,
    schedule: &TrainingSchedule,
    options: &TrainOptions,
    on_epoch: &mut dyn FnMut(&TrainRunState<M>) -> Result<()>,
) -> Result<()> {
    use rand::seq::SliceRandom;

    schedule.validate()?;
    options.train_budget.validate()?;
    options.eval_budget.validate()?;
    check_teacher(&state.student, teacher, loss)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Dataset("training needs non-empty train and test splits".into()));
    }
    let seed = state.seed;
    let train_probe = train.subset(&fixed_subsample(train.len(), options.train_eval_samples, seed));
    let test_probe = test.subset(&fixed_subsample(
        test.len(),
        options.test_eval_samples,
        derive_seed(seed, &[1]),
    ));
    let eval_settings = EvalSettings {
        budget: options.eval_budget,
        restarts: 1,
        batch_size: options.eval_batch_size,
        seed: derive_seed(seed, &[stream::EVAL]),
    };

    while state.epoch < schedule.epochs {
        let epoch = state.epoch;
        let lr = schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(seed, &[stream::SHUFFLE, epoch as u64]));

        let (mut kl_sum, mut feat_sum, mut replaced, mut seen) = (0.0, 0.0, 0usize, 0usize);
        for (b, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let (mut x, y) = train.batch(chunk);
            if options.augment {
                augment_crop_flip(&mut x, &mut rng_for(seed, &[stream::AUGMENT, epoch as u64, b as u64]));
            }
            let trace = batch_objective(
                &state.student,
                teacher,
                loss,
                &x,
                &y,
                &options.train_budget,
                BatchSeeds::derive(seed, epoch, b),
            )?;
            let terms = &trace.output.terms;
            if !terms.total.is_finite() {
                return Err(Error::non_finite(format!("loss at epoch {epoch}, batch {b}")));
            }
            state
                .optimizer
                .step(state.student.params_mut(), &trace.output.param_grad, lr)
                .map_err(|e| match e {
                    Error::NonFinite { context } => {
                        Error::non_finite(format!("{context} at epoch {epoch}, batch {b}"))
                    }
                    other => other,
                })?;
            let m = y.len();
            kl_sum += terms.kl * m as f64;
            feat_sum += terms.feature * m as f64;
            replaced += trace.signal.as_ref().map_or(0, |s| s.replacement_count());
            seen += m;
        }

        let test_m = evaluate(&state.student, &test_probe, Split::Test, &[AttackKind::Pgd], &eval_settings)?;
        let train_m = evaluate(&state.student, &train_probe, Split::Train, &[AttackKind::Pgd], &eval_settings)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_clean_acc: train_m.clean,
            train_robust_acc: train_m.pgd.unwrap_or(0.0),
            test_clean_acc: test_m.clean,
            test_robust_acc: test_m.pgd.unwrap_or(0.0),
            kl_term_mean: kl_sum / seen as f64,
            lpips_term_mean: feat_sum / seen as f64,
            replacement_rate: replaced as f64 / seen as f64,
        };
        let score = if options.train_budget.epsilon == 0.0 {
            record.test_clean_acc
        } else {
            record.test_robust_acc
        };
        if state.best.as_ref().is_none_or(|b| score > b.score) {
            state.best = Some(BestEpoch {
                epoch,
                score,
                params: state.student.params().to_vec(),
            });
        }
        state.history.push(record);
        state.epoch += 1;
        on_epoch(state)?;
    }
    Ok(())
}

/// Index of the largest value; ties go to the earliest entry.
pub fn best_epoch_index(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, bv)) if v <= bv => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

fn no_teacher<M: Classifier>() -> Option<&'static Teacher<'static, M>> {
    None
}

/// Standard adversarial training: PGD against the current student, then
/// one SGD step on the adversarial cross-entropy. A zero-radius budget is
/// plain clean training.
pub fn sat_train<M: Classifier + 'static>(
    student: M,
    train: &Dataset,
    test: &Dataset,
    schedule: &TrainingSchedule,
    options: &TrainOptions,
) -> Result<TrainRunState<M>> {
    let mut state = TrainRunState::new(student, schedule, options.schedule_seed);
    run_training(
        &mut state,
        no_teacher::<M>(),
        &ArdirLossConfig::sat(),
        train,
        test,
        schedule,
        options,
        &mut |_| Ok(()),
    )?;
    Ok(state)
}

/// Output-only distillation with `α = 1` (the `t²` factor included).
#[allow(clippy::too_many_arguments)]
pub fn ard_train<M: Classifier, T: Classifier>(
    student: M,
    teacher: &T,
    teacher_config: TeacherConfig,
    temperature: f64,
    train: &Dataset,
    test: &Dataset,
    schedule: &TrainingSchedule,
    options: &TrainOptions,
) -> Result<TrainRunState<M>> {
    ardir_train(
        student,
        teacher,
        teacher_config,
        &ArdirLossConfig::ard(temperature),
        train,
        test,
        schedule,
        options,
    )
}

/// Output + representation distillation (or any variant given in `loss`).
#[allow(clippy::too_many_arguments)]
pub fn ardir_train<M: Classifier, T: Classifier>(
    student: M,
    teacher: &T,
    teacher_config: TeacherConfig,
    loss: &ArdirLossConfig,
    train: &Dataset,
    test: &Dataset,
    schedule: &TrainingSchedule,
    options: &TrainOptions,
) -> Result<TrainRunState<M>> {
    let mut state = TrainRunState::new(student, schedule, options.schedule_seed);
    let t = Teacher {
        model: teacher,
        config: teacher_config,
    };
    run_training(&mut state, Some(&t), loss, train, test, schedule, options, &mut |_| Ok(()))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ca_is_rejected() {
        assert!(TeacherConfig::new(TeacherModelKind::Clean, TeacherDataMode::Adversarial).is_err());
        let rc = TeacherConfig::new(TeacherModelKind::Robust, TeacherDataMode::Clean).unwrap();
        assert_eq!(rc.combo(), TeacherCombo::RC);
        for c in [TeacherCombo::CC, TeacherCombo::RC, TeacherCombo::RA] {
            assert_eq!(TeacherConfig::from_combo(c).combo(), c);
        }
    }

    #[test]
    fn ca_is_rejected_when_deserializing() {
        let bad: std::result::Result<TeacherConfig, _> =
            serde_json::from_str(r#"{"model":"clean","data":"adversarial"}"#);
        assert!(bad.is_err());
        let ok: TeacherConfig = serde_json::from_str(r#"{"model":"robust","data":"adversarial"}"#).unwrap();
        assert_eq!(ok.combo(), TeacherCombo::RA);
    }

    #[test]
    fn best_epoch_ties_go_to_earliest() {
        assert_eq!(best_epoch_index(&[0.1, 0.3, 0.3, 0.2]), Some(1));
        assert_eq!(best_epoch_index(&[]), None);
    }

    #[test]
    fn subsample_is_fixed_and_sorted() {
        let a = fixed_subsample(100, 10, 3);
        assert_eq!(a, fixed_subsample(100, 10, 3));
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(fixed_subsample(5, 0, 3), vec![0, 1, 2, 3, 4]);
    }
}
