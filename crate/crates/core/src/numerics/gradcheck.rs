//! Central finite differences, used as an independent oracle for the
//! hand-written gradients.

use super::params::{Gradient, ParamVector};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Estimates `∇f(θ)` coordinate by coordinate with
/// `(f(θ + εeᵢ) − f(θ − εeᵢ)) / 2ε`.
pub fn finite_diff_grad<F>(loss_fn: F, params: &ParamVector, step: f64) -> Result<Gradient>
where
    F: Fn(&ParamVector) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!(
            "finite-difference step {step} must be positive"
        )));
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params.values()[i];
        probe.values_mut()[i] = orig + step;
        let plus = loss_fn(&probe);
        probe.values_mut()[i] = orig - step;
        let minus = loss_fn(&probe);
        probe.values_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::non_finite(format!(
                "loss evaluated to {plus} / {minus} while perturbing coordinate {i}"
            )));
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Gradient::new(out, params.layout().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Layout, MlpSpec};
    use std::sync::Arc;

    fn scalar_params(v: &[f64]) -> ParamVector {
        let spec = MlpSpec::linear(v.len() - 1, 1).unwrap();
        ParamVector::new(v.to_vec(), Arc::new(Layout::for_spec(&spec))).unwrap()
    }

    #[test]
    fn quadratic() {
        let p = scalar_params(&[3.0, 0.0]);
        let g = finite_diff_grad(|p| p.values()[0].powi(2), &p, 1e-5).unwrap();
        assert!((g.values()[0] - 6.0).abs() <= 1e-6);
        assert!(g.values()[1].abs() <= 1e-12);
    }

    #[test]
    fn constant_function() {
        let p = scalar_params(&[1.0, 2.0, 3.0]);
        let g = finite_diff_grad(|_| 4.2, &p, DEFAULT_STEP).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_step_and_nan_loss() {
        let p = scalar_params(&[1.0, 2.0]);
        assert!(finite_diff_grad(|_| 0.0, &p, 0.0).is_err());
        assert!(matches!(
            finite_diff_grad(|_| f64::NAN, &p, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }
}
