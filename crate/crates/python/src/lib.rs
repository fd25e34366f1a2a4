//! Python bindings for `ardir-core`.
//!
//! Arrays cross the boundary as flat float lists plus a shape tuple, so the
//! module has no NumPy build dependency; `np.asarray(x).ravel().tolist()`
//! and `np.reshape(out, shape)` do the conversion on the Python side.

use std::path::PathBuf;

use ardir_core::attacks::{self, PerturbationBudget};
use ardir_core::checkpoint::Checkpoint;
use ardir_core::distill::{self, ArdirLossConfig, TeacherSignal};
use ardir_core::eval::{self, GapReport};
use ardir_core::harness::config::ExperimentConfig;
use ardir_core::harness::data::{ingest_dataset, DatasetSpec};
use ardir_core::harness::presets;
use ardir_core::harness::registry::TeacherRegistry;
use ardir_core::harness::run::{train_run, RunOptions};
use ardir_core::model::{Classifier, CnnArchitecture, ConvBlock, InputShape, Mode, SmallCnn};
use ndarray::{Array2, Array4};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Shape4 = (usize, usize, usize, usize);

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn array4(data: Vec<f64>, shape: Shape4) -> PyResult<Array4<f64>> {
    Array4::from_shape_vec(shape, data).map_err(err)
}

fn array2(data: Vec<f64>, shape: (usize, usize)) -> PyResult<Array2<f64>> {
    Array2::from_shape_vec(shape, data).map_err(err)
}

fn flat4(a: Array4<f64>) -> Vec<f64> {
    a.as_standard_layout().iter().copied().collect()
}

/// Convolutional classifier with tapped intermediate activations.
#[pyclass(name = "SmallCnn", module = "ardir", skip_from_py_object)]
#[derive(Clone)]
struct PySmallCnn {
    inner: SmallCnn,
}

#[pymethods]
impl PySmallCnn {
    #[new]
    #[pyo3(signature = (channels, pools, num_classes, in_channels=1, size=8, seed=0))]
    fn new(
        channels: Vec<usize>,
        pools: Vec<bool>,
        num_classes: usize,
        in_channels: usize,
        size: usize,
        seed: u64,
    ) -> PyResult<Self> {
        if channels.len() != pools.len() {
            return Err(err("channels and pools must have the same length"));
        }
        let arch = CnnArchitecture {
            input: InputShape::new(in_channels, size, size),
            num_classes,
            blocks: channels
                .into_iter()
                .zip(pools)
                .map(|(channels, pool)| ConvBlock { channels, pool })
                .collect(),
            taps: Vec::new(),
            input_mean: Vec::new(),
            input_std: Vec::new(),
        };
        Ok(Self {
            inner: SmallCnn::new(arch, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = Checkpoint::load(&path).and_then(|c| c.to_model()).map_err(err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.inner, 0, 0).save(&path).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// (channels, height, width) per tapped layer.
    fn tap_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.inner
            .tap_layers()
            .iter()
            .map(|l| (l.channels, l.height, l.width))
            .collect()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }

    fn set_params(&mut self, params: Vec<f64>) -> PyResult<()> {
        if params.len() != self.inner.num_params() {
            return Err(err(format!("expected {} parameters", self.inner.num_params())));
        }
        self.inner.params_mut().copy_from_slice(&params);
        Ok(())
    }

    /// Flat (n, classes) logits.
    fn logits(&self, x: Vec<f64>, shape: Shape4) -> PyResult<Vec<f64>> {
        let l = self.inner.logits(&array4(x, shape)?, Mode::Eval).map_err(err)?;
        Ok(l.iter().copied().collect())
    }

    fn predict(&self, x: Vec<f64>, shape: Shape4) -> PyResult<Vec<usize>> {
        let l = self.inner.logits(&array4(x, shape)?, Mode::Eval).map_err(err)?;
        Ok(attacks::predictions(&l))
    }
}

#[pyfunction]
fn fgsm(model: &PySmallCnn, x: Vec<f64>, shape: Shape4, y: Vec<usize>, epsilon: f64) -> PyResult<Vec<f64>> {
    let adv = attacks::fgsm(&model.inner, &array4(x, shape)?, &y, epsilon).map_err(err)?;
    Ok(flat4(adv))
}

#[pyfunction]
#[pyo3(signature = (model, x, shape, y, epsilon, step_size, steps, random_init=true, seed=0, restarts=1))]
#[allow(clippy::too_many_arguments)]
fn pgd(
    model: &PySmallCnn,
    x: Vec<f64>,
    shape: Shape4,
    y: Vec<usize>,
    epsilon: f64,
    step_size: f64,
    steps: usize,
    random_init: bool,
    seed: u64,
    restarts: usize,
) -> PyResult<Vec<f64>> {
    let budget = PerturbationBudget {
        epsilon,
        step_size,
        steps,
        random_init,
    };
    let x = array4(x, shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adv = attacks::pgd_multi_restart(&model.inner, &x, &y, &budget, restarts, &mut rng).map_err(err)?;
    Ok(flat4(adv))
}

#[pyfunction]
#[pyo3(signature = (z, temperature=1.0))]
fn softmax(z: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    distill::softmax_temperature(&z, temperature).map_err(err)
}

#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    if p.len() != q.len() {
        return Err(err("p and q must have the same length"));
    }
    Ok(distill::kl_divergence(&p, &q))
}

/// Per-example distance between normalized single-layer feature maps.
#[pyfunction]
fn lpips_distance(a: Vec<f64>, b: Vec<f64>, shape: Shape4) -> PyResult<Vec<f64>> {
    let fa = distill::lpips_normalize(&[array4(a, shape)?]).values;
    let fb = distill::lpips_normalize(&[array4(b, shape)?]).values;
    Ok(distill::row_distances(&fa, &fb).0)
}

/// Feature distance between a student on `x_student` and a teacher on
/// `x_teacher`, per example.
#[pyfunction]
fn model_lpips(
    student: &PySmallCnn,
    teacher: &PySmallCnn,
    x_student: Vec<f64>,
    x_teacher: Vec<f64>,
    shape: Shape4,
) -> PyResult<Vec<f64>> {
    distill::lpips_ardir(&array4(x_student, shape)?, &array4(x_teacher, shape)?, &student.inner, &teacher.inner)
        .map_err(err)
}

/// One batch of the distillation objective; returns the loss terms and the
/// teacher replacement rate.
#[pyfunction]
#[pyo3(signature = (student, teacher, x, x_adv, shape, y, beta=0.6, temperature=1.0))]
#[allow(clippy::too_many_arguments)]
fn ardir_loss<'py>(
    py: Python<'py>,
    student: &PySmallCnn,
    teacher: &PySmallCnn,
    x: Vec<f64>,
    x_adv: Vec<f64>,
    shape: Shape4,
    y: Vec<usize>,
    beta: f64,
    temperature: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ArdirLossConfig::ardir(beta, temperature);
    let x = array4(x, shape)?;
    let signal = TeacherSignal::compute(&teacher.inner, &x, &y, &cfg).map_err(err)?;
    let out = distill::ardir_loss(&student.inner, &x, &array4(x_adv, shape)?, &signal, &cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("total", out.terms.total)?;
    d.set_item("kl", out.terms.kl)?;
    d.set_item("lpips", out.terms.feature)?;
    d.set_item("replacement_rate", signal.replacement_rate())?;
    d.set_item("grad", out.param_grad)?;
    Ok(d)
}

/// ARD loss from logit arrays: `α t² KL + (1 − α) CE`.
#[pyfunction]
#[pyo3(signature = (student_logits, teacher_logits, n_classes, y, alpha=1.0, temperature=1.0))]
fn ard_loss(
    student_logits: Vec<f64>,
    teacher_logits: Vec<f64>,
    n_classes: usize,
    y: Vec<usize>,
    alpha: f64,
    temperature: f64,
) -> PyResult<f64> {
    let n = y.len();
    let s = array2(student_logits, (n, n_classes))?;
    let t = array2(teacher_logits, (n, n_classes))?;
    let signal = distill::replace_wrong_teacher_labels(&t, &y, temperature).map_err(err)?;
    Ok(distill::ard_loss(&s, &signal, &y, alpha, temperature).map_err(err)?.total)
}

fn gap_dict<'py>(py: Python<'py>, report: &GapReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for c in &report.columns {
        let col = PyDict::new(py);
        col.set_item("train", c.train)?;
        col.set_item("test", c.test)?;
        col.set_item("gap", c.gap)?;
        col.set_item("ratio", c.ratio)?;
        d.set_item(&c.name, col)?;
    }
    Ok(d)
}

/// Gap and ratio for clean and PGD accuracy.
#[pyfunction]
fn gap_report<'py>(
    py: Python<'py>,
    train_clean: f64,
    test_clean: f64,
    train_pgd: f64,
    test_pgd: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let report = GapReport::from_pairs(&[("Clean", train_clean, test_clean), ("PGD", train_pgd, test_pgd)]);
    gap_dict(py, &report)
}

/// Seeded synthetic dataset: dict with flat images, labels and shapes.
#[pyfunction]
#[pyo3(signature = (classes=4, size=8, train=2000, test=500, noise=0.1, seed=0))]
fn toy_dataset<'py>(
    py: Python<'py>,
    classes: usize,
    size: usize,
    train: usize,
    test: usize,
    noise: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let splits = ingest_dataset(&DatasetSpec::Toy {
        classes,
        size,
        train,
        test,
        noise,
        seed,
    })
    .map_err(err)?;
    let d = PyDict::new(py);
    for (name, data) in [("train", &splits.train), ("test", &splits.test)] {
        let part = PyDict::new(py);
        part.set_item("images", flat4(data.images.clone()))?;
        part.set_item("shape", data.images.dim())?;
        part.set_item("labels", data.labels.clone())?;
        d.set_item(name, part)?;
    }
    d.set_item("hash", splits.content_hash())?;
    Ok(d)
}

/// Accuracy of `model` on clean inputs and under the given attacks.
#[pyfunction]
#[pyo3(signature = (model, x, shape, y, epsilon, step_size, steps, attacks=vec!["pgd".to_string()], seed=0))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PySmallCnn,
    x: Vec<f64>,
    shape: Shape4,
    y: Vec<usize>,
    epsilon: f64,
    step_size: f64,
    steps: usize,
    attacks: Vec<String>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let kinds = attacks
        .iter()
        .map(|a| match a.as_str() {
            "fgsm" => Ok(eval::AttackKind::Fgsm),
            "pgd" => Ok(eval::AttackKind::Pgd),
            "pgd-mr" => Ok(eval::AttackKind::PgdMr),
            other => Err(err(format!("unknown attack {other:?}"))),
        })
        .collect::<PyResult<Vec<_>>>()?;
    let data = ardir_core::dataset::Dataset::new(array4(x, shape)?, y, model.inner.num_classes()).map_err(err)?;
    let budget = PerturbationBudget {
        epsilon,
        step_size,
        steps,
        random_init: true,
    };
    let m = eval::evaluate(&model.inner, &data, eval::Split::Test, &kinds, &eval::EvalSettings::new(budget, seed))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("clean", m.clean)?;
    for k in kinds {
        d.set_item(k.label(), m.attack(k))?;
    }
    Ok(d)
}

/// Built-in config as TOML text.
#[pyfunction]
fn preset(name: &str) -> PyResult<String> {
    presets::preset(name).and_then(|c| c.to_toml()).map_err(err)
}

/// Trains one seed of a TOML config; returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (config_toml, seed, registry_dir=None))]
fn train(py: Python<'_>, config_toml: &str, seed: u64, registry_dir: Option<PathBuf>) -> PyResult<String> {
    let config = ExperimentConfig::from_toml(config_toml).map_err(err)?;
    let options = RunOptions {
        registry: registry_dir.map_or_else(TeacherRegistry::from_env, TeacherRegistry::new),
        ..RunOptions::default()
    };
    let manifest = py
        .detach(|| {
            let splits = ingest_dataset(&config.dataset)?;
            train_run(&config, seed, &splits, &options)
        })
        .map_err(err)?;
    serde_json::to_string(&manifest).map_err(err)
}

#[pymodule]
fn ardir(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySmallCnn>()?;
    m.add_function(wrap_pyfunction!(fgsm, m)?)?;
    m.add_function(wrap_pyfunction!(pgd, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(lpips_distance, m)?)?;
    m.add_function(wrap_pyfunction!(model_lpips, m)?)?;
    m.add_function(wrap_pyfunction!(ardir_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ard_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gap_report, m)?)?;
    m.add_function(wrap_pyfunction!(toy_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
