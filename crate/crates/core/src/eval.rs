//! Robustness evaluation, generalization-gap reports and result tables.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attacks::{fgsm, pgd, pgd_multi_restart, predictions, PerturbationBudget};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{Classifier, Mode};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    /// Worst case over several random-start PGD runs.
    PgdMr,
}

impl AttackKind {
    pub fn label(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "FGSM",
            AttackKind::Pgd => "PGD",
            AttackKind::PgdMr => "PGD-MR",
        }
    }

    pub fn stream(&self) -> u64 {
        match self {
            AttackKind::Fgsm => 1,
            AttackKind::Pgd => 2,
            AttackKind::PgdMr => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub budget: PerturbationBudget,
    pub restarts: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl EvalSettings {
    pub fn new(budget: PerturbationBudget, seed: u64) -> Self {
        Self {
            budget,
            restarts: 5,
            batch_size: 250,
            seed,
        }
    }
}

/// Accuracies of one model on one split. Each accuracy is exactly
/// `correct / samples`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub split: Split,
    pub samples: usize,
    pub clean: f64,
    pub fgsm: Option<f64>,
    pub pgd: Option<f64>,
    pub pgd_mr: Option<f64>,
}

impl EpochMetrics {
    pub fn attack(&self, kind: AttackKind) -> Option<f64> {
        match kind {
            AttackKind::Fgsm => self.fgsm,
            AttackKind::Pgd => self.pgd,
            AttackKind::PgdMr => self.pgd_mr,
        }
    }

    fn set(&mut self, kind: AttackKind, v: f64) {
        match kind {
            AttackKind::Fgsm => self.fgsm = Some(v),
            AttackKind::Pgd => self.pgd = Some(v),
            AttackKind::PgdMr => self.pgd_mr = Some(v),
        }
    }
}

fn count_correct<M: Classifier>(model: &M, x: &ndarray::Array4<f64>, y: &[usize]) -> Result<usize> {
    let logits = model.logits(x, Mode::Eval)?;
    Ok(predictions(&logits).iter().zip(y).filter(|(p, t)| p == t).count())
}

/// Clean accuracy plus accuracy under each requested attack. Every attack
/// draws its random starts from its own seeded stream, batch after batch.
pub fn evaluate<M: Classifier>(
    model: &M,
    data: &Dataset,
    split: Split,
    attacks: &[AttackKind],
    settings: &EvalSettings,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty split".into()));
    }
    if settings.batch_size == 0 {
        return Err(Error::config("evaluation batch_size must be positive"));
    }
    let n = data.len();
    let mut rngs: Vec<_> = attacks
        .iter()
        .map(|a| rng_for(settings.seed, &[a.stream()]))
        .collect();
    let mut clean = 0usize;
    let mut robust = vec![0usize; attacks.len()];
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(settings.batch_size) {
        let (x, y) = data.batch(chunk);
        clean += count_correct(model, &x, &y)?;
        for ((kind, rng), hits) in attacks.iter().zip(rngs.iter_mut()).zip(robust.iter_mut()) {
            let adv = match kind {
                AttackKind::Fgsm => fgsm(model, &x, &y, settings.budget.epsilon)?,
                AttackKind::Pgd => pgd(model, &x, &y, &settings.budget, rng)?,
                AttackKind::PgdMr => pgd_multi_restart(model, &x, &y, &settings.budget, settings.restarts, rng)?,
            };
            *hits += count_correct(model, &adv, &y)?;
        }
    }
    let mut m = EpochMetrics {
        split,
        samples: n,
        clean: clean as f64 / n as f64,
        fgsm: None,
        pgd: None,
        pgd_mr: None,
    };
    for (kind, hits) in attacks.iter().zip(robust) {
        m.set(*kind, hits as f64 / n as f64);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapColumn {
    pub name: String,
    pub train: f64,
    pub test: f64,
    /// `train − test`
    pub gap: f64,
    /// `test / train`; `None` when the train accuracy is zero.
    pub ratio: Option<f64>,
}

impl GapColumn {
    pub fn new(name: impl Into<String>, train: f64, test: f64) -> Self {
        Self {
            name: name.into(),
            train,
            test,
            gap: train - test,
            ratio: (train > 0.0).then(|| test / train),
        }
    }
}

/// Train/test accuracy, gap and ratio per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub columns: Vec<GapColumn>,
}

impl GapReport {
    pub fn from_pairs(pairs: &[(&str, f64, f64)]) -> Self {
        Self {
            columns: pairs.iter().map(|&(n, tr, te)| GapColumn::new(n, tr, te)).collect(),
        }
    }

    pub fn column(&self, name: &str) -> Option<&GapColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Aligned text table, values to 4 decimals.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<20}", "");
        for c in &self.columns {
            let _ = write!(s, "{:>10}", c.name);
        }
        s.push('\n');
        let rows: [(&str, Box<dyn Fn(&GapColumn) -> String>); 4] = [
            ("Train Acc", Box::new(|c| format!("{:.4}", c.train))),
            ("Test Acc", Box::new(|c| format!("{:.4}", c.test))),
            ("Gap (Train - Test)", Box::new(|c| format!("{:.4}", c.gap))),
            (
                "Ratio (Test/Train)",
                Box::new(|c| c.ratio.map_or("undefined".into(), |r| format!("{r:.4}"))),
            ),
        ];
        for (label, f) in rows.iter() {
            let _ = write!(s, "{label:<20}");
            for c in &self.columns {
                let _ = write!(s, "{:>10}", f(c));
            }
            s.push('\n');
        }
        s
    }
}

/// Gap report over the clean column and every attack column present in
/// both metric sets. Attack columns must match.
pub fn gap_report(train: &EpochMetrics, test: &EpochMetrics) -> Result<GapReport> {
    let mut columns = vec![GapColumn::new("Clean", train.clean, test.clean)];
    for kind in [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::PgdMr] {
        match (train.attack(kind), test.attack(kind)) {
            (Some(a), Some(b)) => columns.push(GapColumn::new(kind.label(), a, b)),
            (None, None) => {}
            _ => {
                return Err(Error::config(format!(
                    "{} measured on only one split",
                    kind.label()
                )))
            }
        }
    }
    Ok(GapReport { columns })
}

/// One defense method in a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub variant: String,
    pub beta: Option<f64>,
    pub temperature: Option<f64>,
    /// `None` when the checkpoint could not be evaluated.
    pub metrics: Option<EpochMetrics>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

pub const RESULTS_HEADER: [&str; 9] = [
    "method",
    "variant",
    "beta",
    "temperature",
    "clean",
    "fgsm",
    "pgd",
    "pgd_mr",
    "best_epoch",
];

fn fmt4(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.4}"))
}

impl ResultRow {
    pub fn cells(&self) -> Vec<String> {
        let acc = |f: fn(&EpochMetrics) -> Option<f64>| match &self.metrics {
            Some(m) => fmt4(f(m)),
            None => "unavailable".to_string(),
        };
        vec![
            self.method.clone(),
            self.variant.clone(),
            fmt4(self.beta),
            fmt4(self.temperature),
            acc(|m| Some(m.clean)),
            acc(|m| m.fgsm),
            acc(|m| m.pgd),
            acc(|m| m.pgd_mr),
            self.best_epoch.map_or(String::new(), |e| e.to_string()),
        ]
    }
}

impl ResultsTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(RESULTS_HEADER)?;
        for r in &self.rows {
            w.write_record(r.cells())?;
        }
        w.flush().map_err(|e| Error::io("<results>", e))?;
        Ok(())
    }

    /// Columns: method, Clean, FGSM, PGD, PGD-MR.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(14);
        let mut s = format!("{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}\n", "Defense Method", "Clean", "FGSM", "PGD", "PGD-MR");
        for r in &self.rows {
            let c = r.cells();
            let cell = |v: &String| if v.is_empty() { "-".to_string() } else if v == "unavailable" { "n/a".into() } else { v.clone() };
            let _ = writeln!(
                s,
                "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}",
                r.method,
                cell(&c[4]),
                cell(&c[5]),
                cell(&c[6]),
                cell(&c[7])
            );
        }
        s
    }
}

/// Assembles a table from already-evaluated rows.
pub fn results_table(rows: Vec<ResultRow>) -> ResultsTable {
    ResultsTable { rows }
}
