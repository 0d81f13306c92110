//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::numgrad::tape::{Tape, Var};
use crate::numgrad::tensor::Tensor;

/// Default perturbation step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare supplied analytic gradients against central differences of `f`.
///
/// Returns the worst relative error over all parameter entries, where the
/// relative error for one entry is `|analytic - fd| / max(1, |fd|)`.
pub fn finite_diff_error<F>(
    f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    step: f64,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {}",
            step
        )));
    }
    if params.len() != analytic.len() {
        return Err(Error::LengthMismatch {
            left: params.len(),
            right: analytic.len(),
        });
    }
    for (p, g) in params.iter().zip(analytic) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "finite_diff_error",
                detail: format!("param {:?} vs gradient {:?}", p.shape(), g.shape()),
            });
        }
    }

    let mut worst = 0.0f64;
    for (p_idx, p) in params.iter().enumerate() {
        for e_idx in 0..p.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut bumped: Vec<Tensor> = params.to_vec();
                let mut data = p.data().to_vec();
                data[e_idx] += delta;
                bumped[p_idx] = Tensor::from_vec(p.shape().to_vec(), data)?;
                f(&bumped)
            };
            let plus = eval(step)?;
            let minus = eval(-step)?;
            let fd = (plus - minus) / (2.0 * step);
            if !fd.is_finite() {
                return Err(Error::NonFinite {
                    op: "finite_diff_error",
                });
            }
            let err = (analytic[p_idx].data()[e_idx] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Build a fresh tape per evaluation, derive analytic gradients from one
/// backward pass, and report the worst relative error against central
/// differences.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::NonScalarLoss {
            elements: tape.value(loss).len(),
        });
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let value = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };
    finite_diff_error(value, params, &analytic, step)
}
