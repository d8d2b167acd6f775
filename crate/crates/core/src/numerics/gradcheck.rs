use crate::error::{invalid, Result};

use super::numerical;

pub const DEFAULT_GRAD_CHECK_EPS: f64 = 1e-5;

/// Compares an analytic gradient against central finite differences.
///
/// `loss_fn` maps a parameter vector to `(loss, gradient)`. The analytic
/// gradient is taken at `params`; each coordinate is then probed at
/// `±eps`. Returns `max_k |analytic_k − fd_k| / max(1, |fd_k|)`.
pub fn grad_check<F>(mut loss_fn: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(eps > 0.0) {
        return Err(invalid("grad_check eps must be positive"));
    }
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(numerical("non-finite loss at the base point"));
    }
    if analytic.len() != params.len() {
        return Err(invalid(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }

    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for k in 0..params.len() {
        probe[k] = params[k] + eps;
        let (plus, _) = loss_fn(&probe)?;
        probe[k] = params[k] - eps;
        let (minus, _) = loss_fn(&probe)?;
        probe[k] = params[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(numerical(format!("non-finite loss while probing parameter {k}")));
        }
        let fd = (plus - minus) / (2.0 * eps);
        let err = (analytic[k] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(|w| Ok((w[0] * w[0], vec![2.0 * w[0]])), &[3.0], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let err = grad_check(|w| Ok((w[0] * w[0], vec![w[0]])), &[3.0], 1e-5).unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn nonfinite_probe_is_an_error() {
        let res = grad_check(
            |w| Ok((if w[0] > 0.0 { f64::INFINITY } else { 0.0 }, vec![0.0])),
            &[0.0],
            1e-5,
        );
        assert!(matches!(res, Err(Error::Numerical(_))));
        assert!(grad_check(|_| Ok((0.0, vec![0.0])), &[0.0], 0.0).is_err());
    }
}
