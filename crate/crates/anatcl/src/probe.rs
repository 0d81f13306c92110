//! Frozen-representation evaluation: ridge regression, a balanced logistic
//! probe, metrics, k-fold cross-validation, and the per-measure ridge
//! feature study.
//!
//! Probes always read the representation h, never the projection z, and
//! standardization is fit on the training fold only.

use std::path::Path;

use crate::anatomy::{Measure, RoiTable};
use crate::cohort::{plain_folds, split_folds, write_atomic, Cohort};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::encoder::forward;
use crate::numgrad::Tensor;

pub const DEFAULT_RIDGE_LAMBDA: f64 = 1.0;
pub const LOGISTIC_ITERATIONS: usize = 2000;
pub const LOGISTIC_LR: f64 = 0.1;
const LOGISTIC_TOL: f64 = 1e-6;

/// Which probe family to fit on the representations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Ridge,
    Logistic,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Ridge => "ridge",
            ProbeKind::Logistic => "logistic",
        }
    }
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ridge" => Ok(ProbeKind::Ridge),
            "logistic" => Ok(ProbeKind::Logistic),
            other => Err(Error::InvalidConfig(format!(
                "unknown probe kind '{}'",
                other
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    Mae,
    BalancedAccuracy,
    R2,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Mae => "mae",
            MetricKind::BalancedAccuracy => "balanced_accuracy",
            MetricKind::R2 => "r2",
        }
    }
}

/// Per-fold values of one metric for one task, with mean and population
/// standard deviation over the folds.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub task: String,
    pub metric: String,
    pub folds: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ProbeResult {
    pub fn new(task: impl Into<String>, metric: impl Into<String>, folds: Vec<f64>) -> Result<Self> {
        if folds.is_empty() || folds.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "probe result needs at least one finite fold value".into(),
            ));
        }
        let k = folds.len() as f64;
        let mean = folds.iter().sum::<f64>() / k;
        let var = folds.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
        Ok(Self {
            task: task.into(),
            metric: metric.into(),
            folds,
            mean,
            std: var.sqrt(),
        })
    }
}

fn require_2d(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match x.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::ShapeMismatch {
            op,
            detail: format!("expected a 2-D matrix, got shape {:?}", other),
        }),
    }
}

/// Cholesky solve of a symmetric positive definite system, row-major.
fn solve_spd(g: &mut [f64], b: &[f64], p: usize) -> Result<Vec<f64>> {
    let scale = (0..p).map(|i| g[i * p + i].abs()).fold(1.0_f64, f64::max);
    // Lower-triangular factor written in place.
    for j in 0..p {
        let mut pivot = g[j * p + j];
        for k in 0..j {
            pivot -= g[j * p + k] * g[j * p + k];
        }
        if pivot <= 1e-12 * scale {
            return Err(Error::SingularSystem);
        }
        let ljj = pivot.sqrt();
        g[j * p + j] = ljj;
        for i in (j + 1)..p {
            let mut v = g[i * p + j];
            for k in 0..j {
                v -= g[i * p + k] * g[j * p + k];
            }
            g[i * p + j] = v / ljj;
        }
    }
    // L y = b, then Lᵀ w = y.
    let mut y = vec![0.0; p];
    for i in 0..p {
        let mut v = b[i];
        for k in 0..i {
            v -= g[i * p + k] * y[k];
        }
        y[i] = v / g[i * p + i];
    }
    let mut w = vec![0.0; p];
    for i in (0..p).rev() {
        let mut v = y[i];
        for k in (i + 1)..p {
            v -= g[k * p + i] * w[k];
        }
        w[i] = v / g[i * p + i];
    }
    Ok(w)
}

/// Ridge regression via the normal equations with an appended constant
/// column; the intercept is not penalized. Returns `cols + 1` weights,
/// intercept last.
pub fn ridge_fit(x: &Tensor, y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let (n, p) = require_2d(x, "ridge_fit")?;
    if y.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: y.len(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyTable);
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "ridge penalty must be finite and >= 0, got {}",
            lambda
        )));
    }
    let q = p + 1;
    let data = x.data();
    let mut g = vec![0.0; q * q];
    let mut aty = vec![0.0; q];
    let at = |row: usize, col: usize| -> f64 {
        if col < p {
            data[row * p + col]
        } else {
            1.0
        }
    };
    for row in 0..n {
        for i in 0..q {
            let ai = at(row, i);
            aty[i] += ai * y[row];
            for j in i..q {
                g[i * q + j] += ai * at(row, j);
            }
        }
    }
    for i in 0..q {
        for j in 0..i {
            g[i * q + j] = g[j * q + i];
        }
    }
    for i in 0..p {
        g[i * q + i] += lambda;
    }
    solve_spd(&mut g, &aty, q)
}

/// Apply ridge weights (intercept last) to a feature matrix.
pub fn ridge_predict(weights: &[f64], x: &Tensor) -> Result<Vec<f64>> {
    let (n, p) = require_2d(x, "ridge_predict")?;
    if weights.len() != p + 1 {
        return Err(Error::LengthMismatch {
            left: weights.len(),
            right: p + 1,
        });
    }
    let data = x.data();
    Ok((0..n)
        .map(|row| {
            let dot: f64 = (0..p).map(|j| data[row * p + j] * weights[j]).sum();
            dot + weights[p]
        })
        .collect())
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn check_binary(y: &[f64]) -> Result<(usize, usize)> {
    let mut pos = 0usize;
    let mut neg = 0usize;
    for v in y {
        match v {
            v if *v == 0.0 => neg += 1,
            v if *v == 1.0 => pos += 1,
            other => {
                return Err(Error::DomainError {
                    op: "binary_labels",
                    detail: format!("label {} is not 0 or 1", other),
                })
            }
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClassInput);
    }
    Ok((pos, neg))
}

/// Class-balanced logistic regression by full-batch gradient descent with
/// zero initialization. Deterministic. Stops at the iteration cap or when
/// the gradient norm falls below 1e-6. Returns `cols + 1` weights, bias
/// last.
pub fn logistic_probe_fit(x: &Tensor, y: &[f64], iterations: usize, lr: f64) -> Result<Vec<f64>> {
    let (n, p) = require_2d(x, "logistic_fit")?;
    if y.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: y.len(),
        });
    }
    let (pos, neg) = check_binary(y)?;
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "logistic lr must be finite and > 0, got {}",
            lr
        )));
    }
    // Inverse-frequency class weights, normalized so they average to 1.
    let w_pos = n as f64 / (2.0 * pos as f64);
    let w_neg = n as f64 / (2.0 * neg as f64);
    let data = x.data();
    let mut w = vec![0.0; p + 1];
    let mut grad = vec![0.0; p + 1];
    for _ in 0..iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for row in 0..n {
            let mut a = w[p];
            for j in 0..p {
                a += data[row * p + j] * w[j];
            }
            let err = sigmoid(a) - y[row];
            let cw = if y[row] == 1.0 { w_pos } else { w_neg };
            let scaled = cw * err / n as f64;
            for j in 0..p {
                grad[j] += scaled * data[row * p + j];
            }
            grad[p] += scaled;
        }
        let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < LOGISTIC_TOL {
            break;
        }
        for j in 0..=p {
            w[j] -= lr * grad[j];
        }
    }
    Ok(w)
}

/// Probabilities σ(xw + b) under logistic weights (bias last).
pub fn logistic_predict(weights: &[f64], x: &Tensor) -> Result<Vec<f64>> {
    Ok(ridge_predict(weights, x)?.into_iter().map(sigmoid).collect())
}

/// Evaluate one metric. Balanced accuracy thresholds predictions at 0.5
/// and averages per-class recalls; targets must contain both classes.
pub fn metric(kind: MetricKind, predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::InvalidConfig("metric needs at least one value".into()));
    }
    let n = targets.len() as f64;
    match kind {
        MetricKind::Mae => Ok(predictions
            .iter()
            .zip(targets)
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / n),
        MetricKind::R2 => {
            let mean = targets.iter().sum::<f64>() / n;
            let ss_tot: f64 = targets.iter().map(|t| (t - mean) * (t - mean)).sum();
            if ss_tot == 0.0 {
                return Err(Error::DomainError {
                    op: "r2",
                    detail: "targets are constant, R² undefined".into(),
                });
            }
            let ss_res: f64 = predictions
                .iter()
                .zip(targets)
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            Ok(1.0 - ss_res / ss_tot)
        }
        MetricKind::BalancedAccuracy => {
            check_binary(targets)?;
            let mut hit = [0usize; 2];
            let mut count = [0usize; 2];
            for (p, t) in predictions.iter().zip(targets) {
                let cls = usize::from(*t == 1.0);
                count[cls] += 1;
                let predicted = usize::from(*p > 0.5);
                if predicted == cls {
                    hit[cls] += 1;
                }
            }
            Ok((hit[0] as f64 / count[0] as f64 + hit[1] as f64 / count[1] as f64) / 2.0)
        }
    }
}

/// Per-column mean/std transform fit on a row subset.
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor, rows: &[usize]) -> Result<Self> {
        let (n, p) = require_2d(x, "standardizer")?;
        if rows.is_empty() {
            return Err(Error::EmptyTable);
        }
        if rows.iter().any(|r| *r >= n) {
            return Err(Error::InvalidConfig("row index out of range".into()));
        }
        let data = x.data();
        let m = rows.len() as f64;
        let mut mean = vec![0.0; p];
        for r in rows {
            for j in 0..p {
                mean[j] += data[r * p + j];
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut std = vec![0.0; p];
        for r in rows {
            for j in 0..p {
                let d = data[r * p + j] - mean[j];
                std[j] += d * d;
            }
        }
        for s in std.iter_mut() {
            *s = (*s / m).sqrt();
            // Constant columns carry no signal; map them to exactly zero.
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Ok(Self { mean, std })
    }

    /// Standardized submatrix of the given rows, in the given order.
    pub fn apply_rows(&self, x: &Tensor, rows: &[usize]) -> Result<Tensor> {
        let (n, p) = require_2d(x, "standardizer")?;
        if p != self.mean.len() {
            return Err(Error::WidthMismatch {
                expected: self.mean.len(),
                actual: p,
            });
        }
        if rows.iter().any(|r| *r >= n) {
            return Err(Error::InvalidConfig("row index out of range".into()));
        }
        let data = x.data();
        let mut out = Vec::with_capacity(rows.len() * p);
        for r in rows {
            for j in 0..p {
                out.push((data[r * p + j] - self.mean[j]) / self.std[j]);
            }
        }
        Tensor::from_vec(vec![rows.len(), p], out)
    }
}

/// Fit the probe on the train rows and score it on the test rows. The
/// standardizer and the probe never see test rows.
fn eval_fold(
    h: &Tensor,
    targets: &[f64],
    train: &[usize],
    test: &[usize],
    probe: ProbeKind,
) -> Result<f64> {
    let scaler = Standardizer::fit(h, train)?;
    let xtr = scaler.apply_rows(h, train)?;
    let xte = scaler.apply_rows(h, test)?;
    let ytr: Vec<f64> = train.iter().map(|i| targets[*i]).collect();
    let yte: Vec<f64> = test.iter().map(|i| targets[*i]).collect();
    match probe {
        ProbeKind::Ridge => {
            let w = ridge_fit(&xtr, &ytr, DEFAULT_RIDGE_LAMBDA)?;
            metric(MetricKind::Mae, &ridge_predict(&w, &xte)?, &yte)
        }
        ProbeKind::Logistic => {
            let w = logistic_probe_fit(&xtr, &ytr, LOGISTIC_ITERATIONS, LOGISTIC_LR)?;
            let probs = logistic_predict(&w, &xte)?;
            metric(MetricKind::BalancedAccuracy, &probs, &yte)
        }
    }
}

/// k-fold evaluation of the frozen encoder on one task. Ridge probes
/// report MAE; logistic probes report balanced accuracy on stratified
/// folds.
pub fn cross_validate(
    cohort: &Cohort,
    checkpoint: &Checkpoint,
    task: &str,
    probe: ProbeKind,
    k: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if checkpoint.encoder_config.input_dim != cohort.x_width() {
        return Err(Error::WidthMismatch {
            expected: checkpoint.encoder_config.input_dim,
            actual: cohort.x_width(),
        });
    }
    let targets = cohort.target_values(task)?;
    let all: Vec<usize> = (0..cohort.len()).collect();
    let x = cohort.x_tensor(&all)?;
    let (h, _) = forward(&checkpoint.params, &x)?;

    let stratify = match probe {
        ProbeKind::Logistic => Some(task),
        ProbeKind::Ridge => None,
    };
    let folds = split_folds(cohort, k, stratify, seed)?;
    let mut values = Vec::with_capacity(k);
    for i in 0..folds.len() {
        let test = &folds[i];
        let train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        values.push(eval_fold(&h, &targets, &train, test, probe)?);
    }
    let metric_name = match probe {
        ProbeKind::Ridge => MetricKind::Mae.name(),
        ProbeKind::Logistic => MetricKind::BalancedAccuracy.name(),
    };
    ProbeResult::new(task, metric_name, values)
}

/// One measure's row of the ridge feature study.
#[derive(Clone, Debug)]
pub struct FeatureStudyRow {
    pub measure: Measure,
    pub neg_mae: ProbeResult,
    pub r2: ProbeResult,
}

/// Ridge-regress age from each measure's K-dim ROI vector separately,
/// k-fold cross-validated; reports negative MAE and R² per measure.
pub fn feature_study(
    table: &RoiTable,
    ages: &[f64],
    k: usize,
    seed: u64,
) -> Result<Vec<FeatureStudyRow>> {
    let measures = table.measures().measures().to_vec();
    if measures.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "feature study needs >= 2 measures, got {}",
            measures.len()
        )));
    }
    let n = table.subject_ids().len();
    if ages.len() != n {
        return Err(Error::LengthMismatch {
            left: ages.len(),
            right: n,
        });
    }
    let roi_count = table.roi_count();
    let folds = plain_folds(n, k, seed)?;

    let mut rows = Vec::with_capacity(measures.len());
    for (mi, measure) in measures.iter().enumerate() {
        let data: Vec<f64> = (0..n)
            .flat_map(|s| (0..roi_count).map(move |roi| table.value(s, roi, mi)))
            .collect();
        let x = Tensor::from_vec(vec![n, roi_count], data)?;

        let mut neg_mae = Vec::with_capacity(folds.len());
        let mut r2 = Vec::with_capacity(folds.len());
        for i in 0..folds.len() {
            let test = &folds[i];
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            let scaler = Standardizer::fit(&x, &train)?;
            let xtr = scaler.apply_rows(&x, &train)?;
            let xte = scaler.apply_rows(&x, test)?;
            let ytr: Vec<f64> = train.iter().map(|s| ages[*s]).collect();
            let yte: Vec<f64> = test.iter().map(|s| ages[*s]).collect();
            let w = ridge_fit(&xtr, &ytr, DEFAULT_RIDGE_LAMBDA)?;
            let preds = ridge_predict(&w, &xte)?;
            neg_mae.push(-metric(MetricKind::Mae, &preds, &yte)?);
            r2.push(metric(MetricKind::R2, &preds, &yte)?);
        }
        rows.push(FeatureStudyRow {
            measure: *measure,
            neg_mae: ProbeResult::new(measure.name(), "neg_mae", neg_mae)?,
            r2: ProbeResult::new(measure.name(), "r2", r2)?,
        });
    }
    Ok(rows)
}

/// Write results as CSV `task,metric,fold,value` with 1-based folds. Each
/// result is followed by a summary row whose third and fourth fields hold
/// the mean and the population std instead of a fold id and value.
pub fn write_probe_results(path: &Path, results: &[ProbeResult]) -> Result<()> {
    let mut bytes = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut bytes);
        w.write_record(["task", "metric", "fold", "value"])?;
        for r in results {
            for (i, v) in r.folds.iter().enumerate() {
                w.write_record([
                    r.task.as_str(),
                    r.metric.as_str(),
                    &(i + 1).to_string(),
                    &v.to_string(),
                ])?;
            }
            w.write_record([
                r.task.as_str(),
                r.metric.as_str(),
                &r.mean.to_string(),
                &r.std.to_string(),
            ])?;
        }
        w.flush()?;
    }
    write_atomic(path, &bytes)
}
