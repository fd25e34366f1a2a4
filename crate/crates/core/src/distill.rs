//! Distillation losses: temperature softmax, KL divergence, the
//! spatial-sum-normalized feature distance between two models' internal
//! representations, and the combined output + representation objective.
//!
//! Every batch loss is a mean over examples. Gradients returned alongside a
//! loss are gradients of that mean.

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_tap_compat, Classifier, GradTargets, Mode};

/// Spatial sums with magnitude below this are replaced by it.
pub const NORM_EPS: f64 = 1e-8;
/// Lower bound applied to `q` inside the log of [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Cross-entropy on the student's adversarial examples.
    Sat,
    /// `α t² KL + (1 − α) CE` against teacher outputs.
    Ard,
    /// `(1 − β) KL + β · feature distance`.
    Ardir,
}

/// Distance between internal representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureDistance {
    /// L2 distance between normalized, layer-size-scaled feature stacks.
    #[default]
    Lpips,
    /// L2 distance between the raw concatenated activations (ablation).
    RawL2,
}

/// Which student input feeds the representation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StudentFeatureInput {
    /// The student's adversarial example `x + η`.
    #[default]
    Adversarial,
    /// The clean input `x` (ablation).
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArdirLossConfig {
    pub variant: LossVariant,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default)]
    pub distance: FeatureDistance,
    #[serde(default)]
    pub student_feature_input: StudentFeatureInput,
    /// Replace teacher targets by the one-hot label when the teacher's
    /// prediction is wrong.
    #[serde(default = "yes")]
    pub replace_wrong_labels: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl ArdirLossConfig {
    pub fn sat() -> Self {
        Self {
            variant: LossVariant::Sat,
            beta: 0.0,
            temperature: 1.0,
            alpha: 1.0,
            distance: FeatureDistance::Lpips,
            student_feature_input: StudentFeatureInput::Adversarial,
            replace_wrong_labels: true,
        }
    }

    pub fn ard(temperature: f64) -> Self {
        Self {
            variant: LossVariant::Ard,
            temperature,
            ..Self::sat()
        }
    }

    pub fn ardir(beta: f64, temperature: f64) -> Self {
        Self {
            variant: LossVariant::Ardir,
            beta,
            temperature,
            ..Self::sat()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn uses_teacher(&self) -> bool {
        self.variant != LossVariant::Sat
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::config(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn log_softmax_into(z: &[f64], t: f64, out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|&v| ((v - max) / t).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max) / t - lse;
    }
}

/// `σ_t(z)_i = exp(z_i / t) / Σ_j exp(z_j / t)`, evaluated after subtracting
/// the maximum logit.
pub fn softmax_temperature(z: &[f64], t: f64) -> Result<Vec<f64>> {
    check_temperature(t)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("softmax logits"));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|&v| ((v - max) / t).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    Ok(p)
}

/// Row-wise temperature softmax.
pub fn softmax_rows(z: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
    let mut out = z.clone();
    for mut row in out.outer_iter_mut() {
        let p = softmax_temperature(row.as_slice().expect("contiguous"), t)?;
        row.as_slice_mut().expect("contiguous").copy_from_slice(&p);
    }
    Ok(out)
}

/// `Σ p_i ln(p_i / q_i)` with `0 ln 0 = 0` and `q_i` floored at
/// [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_FLOOR).ln()))
        .sum::<f64>()
        .max(0.0)
}

/// Per-example softmax cross-entropy and the gradient of the summed loss
/// w.r.t. the logits (`softmax(z) − onehot(y)` per row).
pub fn cross_entropy(logits: &Array2<f64>, y: &[usize]) -> Result<(Vec<f64>, Array2<f64>)> {
    let (n, k) = logits.dim();
    if y.len() != n {
        return Err(Error::Shape {
            expected: format!("{n} labels"),
            actual: y.len().to_string(),
        });
    }
    let mut grad = Array2::zeros((n, k));
    let mut losses = Vec::with_capacity(n);
    let mut logp = vec![0.0; k];
    for (i, (row, mut g)) in logits.outer_iter().zip(grad.outer_iter_mut()).enumerate() {
        if y[i] >= k {
            return Err(Error::config(format!("label {} out of range for {k} classes", y[i])));
        }
        log_softmax_into(row.as_slice().expect("contiguous"), 1.0, &mut logp);
        losses.push(-logp[y[i]]);
        for (gj, &lp) in g.iter_mut().zip(&logp) {
            *gj = lp.exp();
        }
        g[y[i]] -= 1.0;
    }
    Ok((losses, grad))
}

/// Per-example `KL(target_i ‖ σ_t(z_i))` computed in log space, and the
/// gradient of the summed divergence w.r.t. `z`: `(σ_t(z) − target) / t`.
pub fn distillation_kl(
    student_logits: &Array2<f64>,
    targets: &Array2<f64>,
    t: f64,
) -> Result<(Vec<f64>, Array2<f64>)> {
    check_temperature(t)?;
    if student_logits.dim() != targets.dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", student_logits.dim()),
            actual: format!("{:?}", targets.dim()),
        });
    }
    let (n, k) = student_logits.dim();
    let mut grad = Array2::zeros((n, k));
    let mut values = Vec::with_capacity(n);
    let mut logq = vec![0.0; k];
    for ((z, p), mut g) in student_logits.outer_iter().zip(targets.outer_iter()).zip(grad.outer_iter_mut()) {
        log_softmax_into(z.as_slice().expect("contiguous"), t, &mut logq);
        let kl: f64 = p
            .iter()
            .zip(&logq)
            .filter(|(&pi, _)| pi > 0.0)
            .map(|(&pi, &lq)| pi * (pi.ln() - lq))
            .sum();
        values.push(kl.max(0.0));
        for ((gj, &pi), &lq) in g.iter_mut().zip(p.iter()).zip(&logq) {
            *gj = (lq.exp() - pi) / t;
        }
    }
    Ok((values, grad))
}

/// Normalized feature stacks for a batch, one row per example.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub values: Array2<f64>,
    /// (example, layer, channel) triples whose spatial sum had magnitude
    /// below [`NORM_EPS`].
    pub degenerate_channels: usize,
    /// Per (example, layer, channel) denominator; `None` when stabilized.
    denominators: Vec<Option<f64>>,
}

/// Divides every channel map by its spatial sum (by [`NORM_EPS`] when the
/// sum is smaller than that in magnitude), scales
/// layer `l` by `1/√(W_l H_l)` and concatenates channels then layers.
pub fn lpips_normalize(taps: &[Array4<f64>]) -> FeatureStack {
    let n = taps.first().map_or(0, |t| t.dim().0);
    let dim: usize = taps.iter().map(|t| t.len() / n.max(1)).sum();
    let channels: usize = taps.iter().map(|t| t.dim().1).sum();
    let mut values = Array2::zeros((n, dim));
    let mut denominators = Vec::with_capacity(n * channels);
    let mut degenerate = 0;
    for (i, mut row) in values.outer_iter_mut().enumerate() {
        let out = row.as_slice_mut().expect("contiguous");
        let mut offset = 0;
        for tap in taps {
            let (_, c, h, w) = tap.dim();
            let plane = h * w;
            let scale = 1.0 / (plane as f64).sqrt();
            let ex = tap.index_axis(Axis(0), i);
            let ex = ex.as_slice().expect("standard layout");
            for ch in 0..c {
                let v = &ex[ch * plane..(ch + 1) * plane];
                let sum: f64 = v.iter().sum();
                let denom = if sum.abs() < NORM_EPS {
                    degenerate += 1;
                    denominators.push(None);
                    NORM_EPS
                } else {
                    denominators.push(Some(sum));
                    sum
                };
                for (o, &a) in out[offset..offset + plane].iter_mut().zip(v) {
                    *o = a / denom * scale;
                }
                offset += plane;
            }
        }
    }
    FeatureStack {
        values,
        degenerate_channels: degenerate,
        denominators,
    }
}

/// Backpropagates a gradient on the feature stack to the raw taps.
pub fn lpips_normalize_backward(taps: &[Array4<f64>], stack: &FeatureStack, grad: &Array2<f64>) -> Vec<Array4<f64>> {
    let mut out: Vec<Array4<f64>> = taps.iter().map(|t| Array4::zeros(t.dim())).collect();
    let channels: usize = taps.iter().map(|t| t.dim().1).sum();
    for (i, g) in grad.outer_iter().enumerate() {
        let g = g.as_slice().expect("contiguous");
        let mut offset = 0;
        let mut ch_index = i * channels;
        for (tap, dtap) in taps.iter().zip(out.iter_mut()) {
            let (_, c, h, w) = tap.dim();
            let plane = h * w;
            let scale = 1.0 / (plane as f64).sqrt();
            let ex = tap.index_axis(Axis(0), i);
            let ex = ex.as_slice().expect("standard layout");
            let mut dex = dtap.index_axis_mut(Axis(0), i);
            let dex = dex.as_slice_mut().expect("standard layout");
            for ch in 0..c {
                let denom = stack.denominators[ch_index];
                ch_index += 1;
                let v = &ex[ch * plane..(ch + 1) * plane];
                let gv = &g[offset..offset + plane];
                let dst = &mut dex[ch * plane..(ch + 1) * plane];
                match denom {
                    Some(s) => {
                        let dot: f64 = gv.iter().zip(v).map(|(a, b)| a * b).sum();
                        for (d, &gj) in dst.iter_mut().zip(gv) {
                            *d = scale * (gj / s - dot / (s * s));
                        }
                    }
                    None => {
                        for (d, &gj) in dst.iter_mut().zip(gv) {
                            *d = scale * gj / NORM_EPS;
                        }
                    }
                }
                offset += plane;
            }
        }
    }
    out
}

fn flatten_taps(taps: &[Array4<f64>]) -> Array2<f64> {
    let n = taps.first().map_or(0, |t| t.dim().0);
    let dim: usize = taps.iter().map(|t| t.len() / n.max(1)).sum();
    let mut out = Array2::zeros((n, dim));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let row = row.as_slice_mut().expect("contiguous");
        let mut offset = 0;
        for tap in taps {
            let ex = tap.index_axis(Axis(0), i);
            let ex = ex.as_slice().expect("standard layout");
            row[offset..offset + ex.len()].copy_from_slice(ex);
            offset += ex.len();
        }
    }
    out
}

fn unflatten_like(taps: &[Array4<f64>], flat: &Array2<f64>) -> Vec<Array4<f64>> {
    let mut out: Vec<Array4<f64>> = taps.iter().map(|t| Array4::zeros(t.dim())).collect();
    for (i, row) in flat.outer_iter().enumerate() {
        let row = row.as_slice().expect("contiguous");
        let mut offset = 0;
        for o in out.iter_mut() {
            let mut ex = o.index_axis_mut(Axis(0), i);
            let ex = ex.as_slice_mut().expect("standard layout");
            ex.copy_from_slice(&row[offset..offset + ex.len()]);
            offset += ex.len();
        }
    }
    out
}

/// Feature representation for the chosen distance.
fn features(taps: &[Array4<f64>], distance: FeatureDistance) -> (Array2<f64>, Option<FeatureStack>) {
    match distance {
        FeatureDistance::Lpips => {
            let s = lpips_normalize(taps);
            (s.values.clone(), Some(s))
        }
        FeatureDistance::RawL2 => (flatten_taps(taps), None),
    }
}

/// Per-example L2 distances between rows and the gradient of their sum
/// w.r.t. `a` (zero where the distance is zero).
pub fn row_distances(a: &Array2<f64>, b: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let mut grad = a - b;
    let mut dists = Vec::with_capacity(a.dim().0);
    for mut row in grad.outer_iter_mut() {
        let d = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        dists.push(d);
        if d > 0.0 {
            row.mapv_inplace(|v| v / d);
        } else {
            row.fill(0.0);
        }
    }
    (dists, grad)
}

/// Per-example `‖ξ(x_s, student) − ξ(x_t, teacher)‖₂`.
pub fn lpips_ardir<S: Classifier, T: Classifier>(
    x_student: &Array4<f64>,
    x_teacher: &Array4<f64>,
    student: &S,
    teacher: &T,
) -> Result<Vec<f64>> {
    check_tap_compat(student.tap_layers(), teacher.tap_layers())?;
    let s = student.forward(x_student, Mode::Eval)?;
    let t = teacher.forward(x_teacher, Mode::Eval)?;
    let (d, _) = row_distances(&lpips_normalize(&s.taps).values, &lpips_normalize(&t.taps).values);
    Ok(d)
}

/// Frozen teacher information for one batch: raw logits, the KL targets
/// after label replacement, and the teacher's feature stack.
#[derive(Debug, Clone)]
pub struct TeacherSignal {
    pub logits: Array2<f64>,
    /// Probability vectors used as KL targets.
    pub targets: Array2<f64>,
    pub replaced: Vec<bool>,
    pub temperature: f64,
    pub features: Option<Array2<f64>>,
    pub degenerate_channels: usize,
}

impl TeacherSignal {
    /// Targets `σ_t(ẏ)` with no replacement.
    pub fn from_logits(logits: Array2<f64>, t: f64) -> Result<Self> {
        let targets = softmax_rows(&logits, t)?;
        let n = logits.dim().0;
        Ok(Self {
            logits,
            targets,
            replaced: vec![false; n],
            temperature: t,
            features: None,
            degenerate_channels: 0,
        })
    }

    /// Runs the frozen teacher on `x_teacher` in eval mode.
    pub fn compute<T: Classifier>(
        teacher: &T,
        x_teacher: &Array4<f64>,
        y: &[usize],
        config: &ArdirLossConfig,
    ) -> Result<Self> {
        let pass = teacher.forward(x_teacher, Mode::Eval)?;
        let mut signal = if config.replace_wrong_labels {
            replace_wrong_teacher_labels(&pass.logits, y, config.temperature)?
        } else {
            Self::from_logits(pass.logits.clone(), config.temperature)?
        };
        let (f, stack) = features(&pass.taps, config.distance);
        signal.degenerate_channels = stack.map_or(0, |s| s.degenerate_channels);
        signal.features = Some(f);
        Ok(signal)
    }

    pub fn replacement_count(&self) -> usize {
        self.replaced.iter().filter(|&&r| r).count()
    }

    pub fn replacement_rate(&self) -> f64 {
        if self.replaced.is_empty() {
            0.0
        } else {
            self.replacement_count() as f64 / self.replaced.len() as f64
        }
    }
}

/// Where the teacher's raw-logit argmax differs from the label, the KL
/// target becomes the one-hot label; elsewhere it is `σ_t(ẏ)`.
pub fn replace_wrong_teacher_labels(teacher_logits: &Array2<f64>, y: &[usize], t: f64) -> Result<TeacherSignal> {
    let (n, k) = teacher_logits.dim();
    if y.len() != n {
        return Err(Error::Shape {
            expected: format!("{n} labels"),
            actual: y.len().to_string(),
        });
    }
    let mut signal = TeacherSignal::from_logits(teacher_logits.clone(), t)?;
    let preds = crate::attacks::predictions(teacher_logits);
    for (i, (&p, &label)) in preds.iter().zip(y).enumerate() {
        if label >= k {
            return Err(Error::config(format!("label {label} out of range for {k} classes")));
        }
        if p != label {
            let mut row = signal.targets.row_mut(i);
            row.fill(0.0);
            row[label] = 1.0;
            signal.replaced[i] = true;
        }
    }
    Ok(signal)
}

/// Batch-mean loss value, its components, and gradients w.r.t. the student
/// logits and (optionally) the student taps.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: f64,
    pub kl: f64,
    pub feature: f64,
    pub cross_entropy: f64,
    pub grad_logits: Array2<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// `mean_i [α t² KL(target_i ‖ σ_t(z_i)) + (1 − α) CE(z_i, y_i)]`.
pub fn ard_loss(
    student_logits: &Array2<f64>,
    signal: &TeacherSignal,
    y: &[usize],
    alpha: f64,
    t: f64,
) -> Result<LossTerms> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let n = student_logits.dim().0 as f64;
    let (kl, gkl) = distillation_kl(student_logits, &signal.targets, t)?;
    let (ce, gce) = cross_entropy(student_logits, y)?;
    let kl_mean = mean(&kl);
    let ce_mean = mean(&ce);
    let grad = (gkl * (alpha * t * t) + gce * (1.0 - alpha)) / n;
    Ok(LossTerms {
        total: alpha * t * t * kl_mean + (1.0 - alpha) * ce_mean,
        kl: kl_mean,
        feature: 0.0,
        cross_entropy: ce_mean,
        grad_logits: grad,
    })
}

/// Plain cross-entropy objective.
pub fn sat_loss(student_logits: &Array2<f64>, y: &[usize]) -> Result<LossTerms> {
    let n = student_logits.dim().0 as f64;
    let (ce, g) = cross_entropy(student_logits, y)?;
    let ce_mean = mean(&ce);
    Ok(LossTerms {
        total: ce_mean,
        kl: 0.0,
        feature: 0.0,
        cross_entropy: ce_mean,
        grad_logits: g / n,
    })
}

/// Loss value plus the gradient w.r.t. the student's parameters.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub terms: LossTerms,
    pub param_grad: Vec<f64>,
    /// Degenerate channel count on the student side.
    pub degenerate_channels: usize,
}

/// `mean_i [(1 − β) KL(target_i ‖ σ_t(φ(x_adv)_i)) + β D(student_i, teacher_i)]`
/// where `D` is the configured feature distance. The teacher enters only
/// through the detached `signal`.
pub fn ardir_loss<M: Classifier>(
    student: &M,
    x_clean: &Array4<f64>,
    x_adv: &Array4<f64>,
    signal: &TeacherSignal,
    config: &ArdirLossConfig,
) -> Result<ObjectiveOutput> {
    config.validate()?;
    let teacher_features = signal
        .features
        .as_ref()
        .ok_or_else(|| Error::config("teacher signal carries no features"))?;
    let beta = config.beta;
    let t = config.temperature;
    let pass = student.forward(x_adv, Mode::Train)?;
    let n = pass.logits.dim().0 as f64;
    let (kl, gkl) = distillation_kl(&pass.logits, &signal.targets, t)?;
    let kl_mean = mean(&kl);

    let feature_pass = match config.student_feature_input {
        StudentFeatureInput::Adversarial => None,
        StudentFeatureInput::Clean => Some(student.forward(x_clean, Mode::Train)?),
    };
    let feat_taps = feature_pass.as_ref().map_or(&pass.taps, |p| &p.taps);
    let (student_features, stack) = features(feat_taps, config.distance);
    if student_features.dim() != teacher_features.dim() {
        return Err(Error::TapMismatch {
            layer: 0,
            student: format!("feature dim {}", student_features.dim().1),
            teacher: format!("feature dim {}", teacher_features.dim().1),
        });
    }
    let (dist, gdist) = row_distances(&student_features, teacher_features);
    let feature_mean = mean(&dist);

    let grad_logits = gkl * ((1.0 - beta) / n);
    let gfeat = gdist * (beta / n);
    let grad_taps = match &stack {
        Some(s) => lpips_normalize_backward(feat_taps, s, &gfeat),
        None => unflatten_like(feat_taps, &gfeat),
    };

    let param_grad = match &feature_pass {
        None => {
            student
                .backward(&pass, &grad_logits, Some(&grad_taps), GradTargets::PARAMS)
                .params
        }
        Some(fp) => {
            let mut g = student.backward(&pass, &grad_logits, None, GradTargets::PARAMS).params;
            let zero = Array2::zeros(fp.logits.dim());
            let extra = student.backward(fp, &zero, Some(&grad_taps), GradTargets::PARAMS).params;
            g.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
            g
        }
    };

    Ok(ObjectiveOutput {
        terms: LossTerms {
            total: (1.0 - beta) * kl_mean + beta * feature_mean,
            kl: kl_mean,
            feature: feature_mean,
            cross_entropy: 0.0,
            grad_logits,
        },
        param_grad,
        degenerate_channels: stack.map_or(0, |s| s.degenerate_channels),
    })
}

/// Dispatches on `config.variant` and returns loss terms plus the student
/// parameter gradient. `signal` is required for the distillation variants.
pub fn objective<M: Classifier>(
    student: &M,
    x_clean: &Array4<f64>,
    x_adv: &Array4<f64>,
    y: &[usize],
    signal: Option<&TeacherSignal>,
    config: &ArdirLossConfig,
) -> Result<ObjectiveOutput> {
    config.validate()?;
    match config.variant {
        LossVariant::Ardir => {
            let signal = signal.ok_or_else(|| Error::config("ARDIR objective needs a teacher signal"))?;
            ardir_loss(student, x_clean, x_adv, signal, config)
        }
        LossVariant::Sat | LossVariant::Ard => {
            let pass = student.forward(x_adv, Mode::Train)?;
            let terms = if config.variant == LossVariant::Sat {
                sat_loss(&pass.logits, y)?
            } else {
                let signal = signal.ok_or_else(|| Error::config("ARD objective needs a teacher signal"))?;
                ard_loss(&pass.logits, signal, y, config.alpha, config.temperature)?
            };
            let param_grad = student
                .backward(&pass, &terms.grad_logits, None, GradTargets::PARAMS)
                .params;
            Ok(ObjectiveOutput {
                terms,
                param_grad,
                degenerate_channels: 0,
            })
        }
    }
}

/// Gradients of the distillation objective w.r.t. both models' parameters.
/// The teacher side is identically zero: the teacher only contributes the
/// detached [`TeacherSignal`].
#[derive(Debug, Clone)]
pub struct JointGradients {
    pub student: Vec<f64>,
    pub teacher: Vec<f64>,
}

pub fn joint_gradients<S: Classifier, T: Classifier>(
    student: &S,
    teacher: &T,
    x_clean: &Array4<f64>,
    x_adv: &Array4<f64>,
    x_teacher: &Array4<f64>,
    y: &[usize],
    config: &ArdirLossConfig,
) -> Result<JointGradients> {
    check_tap_compat(student.tap_layers(), teacher.tap_layers())?;
    let signal = TeacherSignal::compute(teacher, x_teacher, y, config)?;
    let out = objective(student, x_clean, x_adv, y, Some(&signal), config)?;
    Ok(JointGradients {
        student: out.param_grad,
        teacher: vec![0.0; teacher.num_params()],
    })
}
