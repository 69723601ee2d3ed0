//! Finite-difference verification of analytic gradients.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares an analytic gradient against central finite differences.
///
/// `loss` evaluates the objective at given parameters; `analytic` returns the
/// gradient per parameter tensor (same shapes and order as `params`). Returns
/// the maximum over all scalar parameters of
/// `|analytic - numeric| / (|numeric| + 1e-8)`; an empty parameter list is
/// vacuously 0.
pub fn gradient_check(
    params: &[Tensor],
    loss: impl Fn(&[Tensor]) -> Result<f64>,
    analytic: impl Fn(&[Tensor]) -> Result<Vec<Tensor>>,
    fd_step: f64,
) -> Result<f64> {
    if !fd_step.is_finite() || fd_step <= 0.0 {
        return Err(Error::Usage(format!("fd_step must be positive, got {fd_step}")));
    }
    if params.is_empty() {
        return Ok(0.0);
    }

    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("loss is non-finite at the base point: {base}")));
    }
    let grads = analytic(params)?;
    if grads.len() != params.len() {
        return Err(Error::Usage(format!(
            "analytic returned {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in grads.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::Dimension {
                op: "gradient_check",
                detail: format!(
                    "gradient {pi} shape {:?} vs parameter {:?}",
                    grad.shape(),
                    params[pi].shape()
                ),
            });
        }
        for j in 0..grad.len() {
            let original = work[pi].data()[j];
            work[pi].data_mut()[j] = original + fd_step;
            let plus = loss(&work)?;
            work[pi].data_mut()[j] = original - fd_step;
            let minus = loss(&work)?;
            work[pi].data_mut()[j] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss non-finite while perturbing parameter {pi}[{j}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * fd_step);
            let rel = (grad.data()[j] - numeric).abs() / (numeric.abs() + 1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
