//! The contrastive and supervised loss family.
//!
//! Everything contrastive here is one engine: a weighted multi-positive
//! InfoNCE over a batch of unit-norm embeddings, where the weight of pair
//! (anchor, other) is a degree of positiveness. The age kernel, the
//! anatomical degrees α/β, and SimCLR's binary view pairing are all just
//! different weight matrices.

use crate::error::{Error, Result};
use crate::numgrad::{Tape, Tensor, Var};

/// Where a degree matrix came from, which fixes its diagonal convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegreeKind {
    AgeKernel,
    LocalAnat,
    GlobalAnat,
    SimclrBinary,
}

/// Pairwise degrees of positiveness for one batch.
///
/// Symmetric, entries in \[0,1\]; diagonal is 1 except for the SimCLR kind
/// where an embedding is never its own positive.
#[derive(Clone, Debug, PartialEq)]
pub struct DegreeMatrix {
    kind: DegreeKind,
    n: usize,
    values: Vec<f64>,
}

impl DegreeMatrix {
    pub fn new(kind: DegreeKind, n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::LengthMismatch {
                left: n * n,
                right: values.len(),
            });
        }
        if let Some(v) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::DomainError {
                op: "degree_matrix",
                detail: format!("degrees must lie in [0,1], got {}", v),
            });
        }
        let want_diag = match kind {
            DegreeKind::SimclrBinary => 0.0,
            _ => 1.0,
        };
        for i in 0..n {
            if values[i * n + i] != want_diag {
                return Err(Error::DomainError {
                    op: "degree_matrix",
                    detail: format!(
                        "diagonal entry {} is {}, expected {}",
                        i,
                        values[i * n + i],
                        want_diag
                    ),
                });
            }
            for j in 0..i {
                if values[i * n + j] != values[j * n + i] {
                    return Err(Error::DomainError {
                        op: "degree_matrix",
                        detail: format!("asymmetric at ({}, {})", i, j),
                    });
                }
            }
        }
        Ok(Self { kind, n, values })
    }

    pub fn kind(&self) -> DegreeKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Which objective pretraining optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    Simclr,
    Yaware,
    Expw,
    AnatclLocal,
    AnatclGlobal,
    AnatsslLocal,
    AnatsslGlobal,
    L1Age,
    L1Anat,
}

impl LossVariant {
    pub const ALL: [LossVariant; 9] = [
        LossVariant::Simclr,
        LossVariant::Yaware,
        LossVariant::Expw,
        LossVariant::AnatclLocal,
        LossVariant::AnatclGlobal,
        LossVariant::AnatsslLocal,
        LossVariant::AnatsslGlobal,
        LossVariant::L1Age,
        LossVariant::L1Anat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Simclr => "simclr",
            LossVariant::Yaware => "yaware",
            LossVariant::Expw => "expw",
            LossVariant::AnatclLocal => "anatcl_local",
            LossVariant::AnatclGlobal => "anatcl_global",
            LossVariant::AnatsslLocal => "anatssl_local",
            LossVariant::AnatsslGlobal => "anatssl_global",
            LossVariant::L1Age => "l1_age",
            LossVariant::L1Anat => "l1_anat",
        }
    }

    /// Variants whose degrees (or targets) come from the ROI table.
    pub fn needs_roi_table(self) -> bool {
        matches!(
            self,
            LossVariant::AnatclLocal
                | LossVariant::AnatclGlobal
                | LossVariant::AnatsslLocal
                | LossVariant::AnatsslGlobal
                | LossVariant::L1Anat
        )
    }

    /// Variants evaluated through the Eq. 6 combination.
    pub fn is_combined(self) -> bool {
        matches!(
            self,
            LossVariant::AnatclLocal
                | LossVariant::AnatclGlobal
                | LossVariant::AnatsslLocal
                | LossVariant::AnatsslGlobal
        )
    }

    fn is_anatssl(self) -> bool {
        matches!(self, LossVariant::AnatsslLocal | LossVariant::AnatsslGlobal)
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss variant '{}'", s)))
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Validated loss hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    variant: LossVariant,
    lambda1: f64,
    lambda2: f64,
    temperature: f64,
    sigma: f64,
}

impl LossConfig {
    pub const DEFAULT_TEMPERATURE: f64 = 0.1;
    pub const DEFAULT_SIGMA: f64 = 5.0;

    /// Defaults: λ1 = λ2 = 1 (λ2 = 0 for the AnatSSL ablations), τ = 0.1,
    /// σ = 5 years.
    pub fn new(variant: LossVariant) -> Self {
        Self::build(variant, 1.0, 1.0, Self::DEFAULT_TEMPERATURE, Self::DEFAULT_SIGMA)
            .expect("defaults are valid")
    }

    pub fn build(
        variant: LossVariant,
        lambda1: f64,
        lambda2: f64,
        temperature: f64,
        sigma: f64,
    ) -> Result<Self> {
        if !lambda1.is_finite() || lambda1 < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda1 must be finite and >= 0, got {}",
                lambda1
            )));
        }
        if !lambda2.is_finite() || lambda2 < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda2 must be finite and >= 0, got {}",
                lambda2
            )));
        }
        if !temperature.is_finite() || temperature <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "temperature must be finite and > 0, got {}",
                temperature
            )));
        }
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "sigma must be finite and > 0, got {}",
                sigma
            )));
        }
        let lambda2 = if variant.is_anatssl() { 0.0 } else { lambda2 };
        Ok(Self {
            variant,
            lambda1,
            lambda2,
            temperature,
            sigma,
        })
    }

    pub fn variant(&self) -> LossVariant {
        self.variant
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Gaussian age kernel w = exp(-(y_a - y_b)^2 / (2 sigma^2)).
///
/// Callers must ensure `sigma > 0`.
pub fn age_degree(y_a: f64, y_b: f64, sigma: f64) -> f64 {
    let d = y_a - y_b;
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

/// Pairwise age-kernel degrees for a batch.
pub fn age_degree_matrix(ages: &[f64], sigma: f64) -> Result<DegreeMatrix> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "sigma must be finite and > 0, got {}",
            sigma
        )));
    }
    let n = ages.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in 0..i {
            let w = age_degree(ages[i], ages[j], sigma);
            values[i * n + j] = w;
            values[j * n + i] = w;
        }
    }
    DegreeMatrix::new(DegreeKind::AgeKernel, n, values)
}

/// The shared Eq. 1 engine over raw nonnegative weights.
///
/// `z` must be a 2-D tape value of unit-norm rows (so the dot product is
/// the cosine similarity); `weights` is a flat (n, n) matrix whose diagonal
/// is ignored. Weights need not be symmetric: each anchor row is
/// normalized independently, which is what makes the loss invariant to
/// per-anchor weight scaling.
pub fn weighted_contrastive_weights(
    tape: &mut Tape,
    z: Var,
    weights: &[f64],
    tau: f64,
) -> Result<Var> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "temperature must be finite and > 0, got {}",
            tau
        )));
    }
    let shape = tape.value(z).shape().to_vec();
    let n = match shape.as_slice() {
        [n, _] if *n >= 2 => *n,
        [n, _] => {
            return Err(Error::InvalidConfig(format!(
                "contrastive batch needs at least 2 rows, got {}",
                n
            )))
        }
        other => {
            return Err(Error::ShapeMismatch {
                op: "weighted_contrastive",
                detail: format!("z must be 2-D, got {:?}", other),
            })
        }
    };
    if weights.len() != n * n {
        return Err(Error::LengthMismatch {
            left: n * n,
            right: weights.len(),
        });
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::DomainError {
            op: "weighted_contrastive",
            detail: format!("weights must be finite and nonnegative, got {}", w),
        });
    }

    // Row-normalize with the diagonal zeroed: wn[i][j] = w[i][j] / sum_{k != i} w[i][k].
    let mut wn = vec![0.0; n * n];
    for i in 0..n {
        let total: f64 = (0..n).filter(|j| *j != i).map(|j| weights[i * n + j]).sum();
        if total <= 0.0 {
            return Err(Error::DegenerateAnchor { anchor: i });
        }
        for j in 0..n {
            if j != i {
                wn[i * n + j] = weights[i * n + j] / total;
            }
        }
    }
    let mut mask = vec![1.0; n * n];
    for i in 0..n {
        mask[i * n + i] = 0.0;
    }

    let wn = tape.leaf(Tensor::from_vec(vec![n, n], wn)?);
    let mask = tape.leaf(Tensor::from_vec(vec![n, n], mask)?);
    let ones_col = tape.leaf(Tensor::from_vec(vec![n, 1], vec![1.0; n])?);

    // loss = mean_i [ log sum_{t != i} exp(s_it / tau) - sum_j wn_ij s_ij / tau ]
    let zt = tape.transpose(z)?;
    let sims = tape.matmul(z, zt)?;
    let scaled = tape.smul(sims, 1.0 / tau)?;
    let e = tape.exp(scaled)?;
    let e_off = tape.mul(e, mask)?;
    let denom = tape.matmul(e_off, ones_col)?;
    let log_denom = tape.log(denom)?;
    let pull = tape.mul(wn, scaled)?;
    let lhs = tape.sum(log_denom)?;
    let rhs = tape.sum(pull)?;
    let gap = tape.sub(lhs, rhs)?;
    tape.smul(gap, 1.0 / n as f64)
}

/// Eq. 1 engine over a typed degree matrix.
pub fn weighted_contrastive(
    tape: &mut Tape,
    z: Var,
    degrees: &DegreeMatrix,
    tau: f64,
) -> Result<Var> {
    let rows = tape.value(z).rows();
    if degrees.n() != rows {
        return Err(Error::LengthMismatch {
            left: degrees.n(),
            right: rows,
        });
    }
    weighted_contrastive_weights(tape, z, degrees.values(), tau)
}

/// y-Aware loss: Eq. 1 with age-kernel degrees.
pub fn yaware_loss(
    tape: &mut Tape,
    z: Var,
    ages: &[f64],
    sigma: f64,
    tau: f64,
) -> Result<Var> {
    let rows = tape.value(z).rows();
    if ages.len() != rows {
        return Err(Error::LengthMismatch {
            left: ages.len(),
            right: rows,
        });
    }
    let degrees = age_degree_matrix(ages, sigma)?;
    weighted_contrastive(tape, z, &degrees, tau)
}

/// Exponentially reweighted baseline: per-pair weight exp(w) - 1 where w is
/// the age kernel. An approximation of the cited baseline, whose exact
/// formula is not given here.
pub fn expw_loss(
    tape: &mut Tape,
    z: Var,
    ages: &[f64],
    sigma: f64,
    tau: f64,
) -> Result<Var> {
    let rows = tape.value(z).rows();
    if ages.len() != rows {
        return Err(Error::LengthMismatch {
            left: ages.len(),
            right: rows,
        });
    }
    let kernel = age_degree_matrix(ages, sigma)?;
    let weights: Vec<f64> = kernel.values().iter().map(|w| w.exp() - 1.0).collect();
    weighted_contrastive_weights(tape, z, &weights, tau)
}

/// AnatCL local term (Eq. 3): Eq. 1 engine weighted by α.
pub fn anatcl_local_loss(
    tape: &mut Tape,
    z: Var,
    degrees: &DegreeMatrix,
    tau: f64,
) -> Result<Var> {
    if degrees.kind() != DegreeKind::LocalAnat {
        return Err(Error::InvalidConfig(format!(
            "anatcl_local_loss needs a LocalAnat degree matrix, got {:?}",
            degrees.kind()
        )));
    }
    weighted_contrastive(tape, z, degrees, tau)
}

/// AnatCL global term (Eq. 5): Eq. 1 engine weighted by β.
pub fn anatcl_global_loss(
    tape: &mut Tape,
    z: Var,
    degrees: &DegreeMatrix,
    tau: f64,
) -> Result<Var> {
    if degrees.kind() != DegreeKind::GlobalAnat {
        return Err(Error::InvalidConfig(format!(
            "anatcl_global_loss needs a GlobalAnat degree matrix, got {:?}",
            degrees.kind()
        )));
    }
    weighted_contrastive(tape, z, degrees, tau)
}

/// Eq. 6: λ1 · L_anat + λ2 · L_age.
///
/// `degrees` may be omitted when λ1 = 0; `ages` are unused when λ2 = 0.
pub fn combined_loss(
    tape: &mut Tape,
    z: Var,
    ages: &[f64],
    degrees: Option<&DegreeMatrix>,
    config: &LossConfig,
) -> Result<Var> {
    let variant = config.variant();
    if !variant.is_combined() {
        return Err(Error::InvalidConfig(format!(
            "combined_loss does not apply to variant '{}'",
            variant
        )));
    }
    let anat = if config.lambda1() > 0.0 {
        let degrees = degrees.ok_or_else(|| Error::MissingDegrees {
            variant: variant.name().to_string(),
        })?;
        let term = match variant {
            LossVariant::AnatclLocal | LossVariant::AnatsslLocal => {
                anatcl_local_loss(tape, z, degrees, config.temperature())?
            }
            _ => anatcl_global_loss(tape, z, degrees, config.temperature())?,
        };
        Some(tape.smul(term, config.lambda1())?)
    } else {
        None
    };
    let age = if config.lambda2() > 0.0 {
        let term = yaware_loss(tape, z, ages, config.sigma(), config.temperature())?;
        Some(tape.smul(term, config.lambda2())?)
    } else {
        None
    };
    match (anat, age) {
        (Some(a), Some(b)) => tape.add(a, b),
        (Some(a), None) => Ok(a),
        (None, Some(b)) => Ok(b),
        (None, None) => Err(Error::InvalidConfig(
            "combined_loss needs lambda1 > 0 or lambda2 > 0".into(),
        )),
    }
}

/// NT-Xent over 2N view embeddings in block layout: row i of the first
/// half pairs with row i + N, and vice versa.
pub fn simclr_loss(tape: &mut Tape, z: Var, tau: f64) -> Result<Var> {
    let rows = tape.value(z).rows();
    if rows < 2 || rows % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "simclr needs an even number of view embeddings >= 2, got {}",
            rows
        )));
    }
    let half = rows / 2;
    let mut weights = vec![0.0; rows * rows];
    for i in 0..rows {
        let partner = (i + half) % rows;
        weights[i * rows + partner] = 1.0;
    }
    weighted_contrastive_weights(tape, z, &weights, tau)
}

/// Binary SimCLR pairing matrix in the same block layout, for callers that
/// want the weights as a typed DegreeMatrix.
pub fn simclr_degree_matrix(pairs: usize) -> Result<DegreeMatrix> {
    let rows = pairs * 2;
    if pairs == 0 {
        return Err(Error::InvalidConfig("simclr needs at least one pair".into()));
    }
    let mut values = vec![0.0; rows * rows];
    for i in 0..rows {
        let partner = (i + pairs) % rows;
        values[i * rows + partner] = 1.0;
    }
    DegreeMatrix::new(DegreeKind::SimclrBinary, rows, values)
}

/// Mean absolute error between predicted and true ages.
pub fn l1_age_loss(tape: &mut Tape, predictions: Var, ages: &[f64]) -> Result<Var> {
    let pred_shape = tape.value(predictions).shape().to_vec();
    let count = tape.value(predictions).len();
    if count != ages.len() {
        return Err(Error::LengthMismatch {
            left: count,
            right: ages.len(),
        });
    }
    let targets = tape.leaf(Tensor::from_vec(pred_shape, ages.to_vec())?);
    let diff = tape.sub(predictions, targets)?;
    let dist = tape.abs(diff)?;
    tape.mean(dist)
}

/// Mean over the batch of the L1 distance between predicted and true mean
/// global descriptors ω̄.
pub fn anat_sup_loss(tape: &mut Tape, predictions: Var, omega_bar: &[Vec<f64>]) -> Result<Var> {
    let shape = tape.value(predictions).shape().to_vec();
    let (rows, cols) = match shape.as_slice() {
        [r, c] => (*r, *c),
        other => {
            return Err(Error::DimensionMismatch(format!(
                "predictions must be 2-D, got shape {:?}",
                other
            )))
        }
    };
    if omega_bar.len() != rows || omega_bar.iter().any(|o| o.len() != cols) {
        return Err(Error::DimensionMismatch(format!(
            "targets must be {} vectors of length {}",
            rows, cols
        )));
    }
    let flat: Vec<f64> = omega_bar.iter().flatten().copied().collect();
    let targets = tape.leaf(Tensor::from_vec(vec![rows, cols], flat)?);
    let diff = tape.sub(predictions, targets)?;
    let dist = tape.abs(diff)?;
    let total = tape.sum(dist)?;
    tape.smul(total, 1.0 / rows as f64)
}

/// Value container for loss evaluation outside a training step.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    z: Tensor,
    ages: Vec<f64>,
    local: Option<DegreeMatrix>,
    global: Option<DegreeMatrix>,
}

impl EmbeddingBatch {
    /// `z` rows must be unit-norm within 1e-10.
    pub fn new(
        z: Tensor,
        ages: Vec<f64>,
        local: Option<DegreeMatrix>,
        global: Option<DegreeMatrix>,
    ) -> Result<Self> {
        let (rows, _) = match z.shape() {
            [r, c] => (*r, *c),
            other => {
                return Err(Error::ShapeMismatch {
                    op: "embedding_batch",
                    detail: format!("z must be 2-D, got {:?}", other),
                })
            }
        };
        if rows < 2 {
            return Err(Error::InvalidConfig(format!(
                "embedding batch needs at least 2 rows, got {}",
                rows
            )));
        }
        if ages.len() != rows {
            return Err(Error::LengthMismatch {
                left: ages.len(),
                right: rows,
            });
        }
        for i in 0..rows {
            let norm = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-10 {
                return Err(Error::DomainError {
                    op: "embedding_batch",
                    detail: format!("row {} has norm {}, expected 1", i, norm),
                });
            }
        }
        for (m, label) in [(&local, "local"), (&global, "global")] {
            if let Some(m) = m {
                if m.n() != rows {
                    return Err(Error::DimensionMismatch(format!(
                        "{} degree matrix is {}x{} but batch has {} rows",
                        label,
                        m.n(),
                        m.n(),
                        rows
                    )));
                }
            }
        }
        Ok(Self {
            z,
            ages,
            local,
            global,
        })
    }

    pub fn z(&self) -> &Tensor {
        &self.z
    }

    pub fn ages(&self) -> &[f64] {
        &self.ages
    }

    pub fn local(&self) -> Option<&DegreeMatrix> {
        self.local.as_ref()
    }

    pub fn global(&self) -> Option<&DegreeMatrix> {
        self.global.as_ref()
    }
}

/// Evaluate a contrastive variant on a prepared batch. For `simclr` the
/// rows of z are 2N block-paired views. The supervised L1 variants need
/// model predictions and are evaluated inside the training step instead.
pub fn evaluate_loss(batch: &EmbeddingBatch, config: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.leaf(batch.z().clone());
    let loss = match config.variant() {
        LossVariant::Simclr => simclr_loss(&mut tape, z, config.temperature())?,
        LossVariant::Yaware => yaware_loss(
            &mut tape,
            z,
            batch.ages(),
            config.sigma(),
            config.temperature(),
        )?,
        LossVariant::Expw => expw_loss(
            &mut tape,
            z,
            batch.ages(),
            config.sigma(),
            config.temperature(),
        )?,
        LossVariant::AnatclLocal | LossVariant::AnatsslLocal => {
            combined_loss(&mut tape, z, batch.ages(), batch.local(), config)?
        }
        LossVariant::AnatclGlobal | LossVariant::AnatsslGlobal => {
            combined_loss(&mut tape, z, batch.ages(), batch.global(), config)?
        }
        LossVariant::L1Age | LossVariant::L1Anat => {
            return Err(Error::InvalidConfig(format!(
                "variant '{}' needs model predictions and is evaluated in the training step",
                config.variant()
            )))
        }
    };
    tape.value(loss).item()
}
