//! Iterative-differentiation (ITD) solver for bilevel problems
//!
//! ```text
//! min_{x_u}  F(x_u, x_l*)    s.t.  x_l* ∈ argmin_{x_l} g(x_u, x_l)
//! ```
//!
//! Each outer iteration warm-starts the lower variable from the previous
//! outer iteration, takes `D` gradient steps on `g`, then takes one step on
//! the upper variable along the direct partial `∂F/∂x_u` evaluated at the
//! inner iterate. No implicit second-order correction is applied.

mod adapter;
mod problem;

pub use adapter::FedGradNormBilevel;
pub use problem::{BilevelObjective, BilevelProblem, GradFn, ScalarFn};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ItdConfig {
    /// Outer iterations `K`.
    pub outer_iters: usize,
    /// Inner iterations `D` per outer iteration.
    pub inner_iters: usize,
    /// Inner (lower-level) step size.
    pub alpha: f64,
    /// Outer (upper-level) step size.
    pub beta: f64,
    pub x_u0: Vec<f64>,
    pub x_l0: Vec<f64>,
}

impl ItdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return Err(Error::invalid(
                "ITD needs at least one outer and one inner iteration",
            ));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "ITD step {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Record of one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ItdStep {
    /// Lower iterate the inner loop started from.
    pub lower_start: Vec<f64>,
    /// Lower iterate after the inner loop.
    pub lower_end: Vec<f64>,
    /// `F(x_u(k), x_l^D(k))`.
    pub upper_value: f64,
    /// `g(x_u(k), x_l^D(k))`.
    pub lower_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItdResult {
    pub x_u: Vec<f64>,
    pub x_l: Vec<f64>,
    pub trace: Vec<ItdStep>,
}

fn check_finite(what: &str, k: usize, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(format!(
            "{what} iterate at outer iteration {k}"
        )))
    }
}

pub fn itd_solve<P: BilevelObjective + ?Sized>(
    problem: &mut P,
    config: &ItdConfig,
) -> Result<ItdResult> {
    config.validate()?;
    if config.x_u0.len() != problem.upper_dim() || config.x_l0.len() != problem.lower_dim() {
        return Err(Error::invalid(format!(
            "initial points have dimensions ({}, {}), problem expects ({}, {})",
            config.x_u0.len(),
            config.x_l0.len(),
            problem.upper_dim(),
            problem.lower_dim()
        )));
    }
    let mut x_u = config.x_u0.clone();
    let mut x_l = config.x_l0.clone();
    let mut trace = Vec::with_capacity(config.outer_iters);
    for k in 0..config.outer_iters {
        problem.begin_outer(k, &x_u, &x_l)?;
        let lower_start = x_l.clone();
        for _ in 0..config.inner_iters {
            x_l = problem.inner_step(&x_u, &x_l, config.alpha)?;
            check_finite("lower", k, &x_l)?;
        }
        let upper_value = problem.upper_value(&x_u, &x_l)?;
        let lower_value = problem.lower_value(&x_u, &x_l)?;
        x_u = problem.outer_step(&x_u, &x_l, config.beta)?;
        check_finite("upper", k, &x_u)?;
        trace.push(ItdStep {
            lower_start,
            lower_end: x_l.clone(),
            upper_value,
            lower_value,
        });
    }
    Ok(ItdResult { x_u, x_l, trace })
}
