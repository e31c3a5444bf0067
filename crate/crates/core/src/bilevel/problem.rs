use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// The pieces of a bilevel problem an ITD run needs.
///
/// `inner_step` and `outer_step` default to plain gradient steps; problems
/// with extra structure (a projection, or an outer step assembled from
/// distributed updates) override them.
pub trait BilevelObjective {
    fn upper_dim(&self) -> usize;
    fn lower_dim(&self) -> usize;

    /// Upper objective `F(x_u, x_l)`.
    fn upper_value(&self, x_u: &[f64], x_l: &[f64]) -> Result<f64>;
    /// Lower objective `g(x_u, x_l)`.
    fn lower_value(&self, x_u: &[f64], x_l: &[f64]) -> Result<f64>;
    /// `∇_{x_l} g(x_u, x_l)`.
    fn lower_grad(&self, x_u: &[f64], x_l: &[f64]) -> Result<Vec<f64>>;
    /// Direct partial `∂F/∂x_u` at `(x_u, x_l)`.
    fn upper_grad(&self, x_u: &[f64], x_l: &[f64]) -> Result<Vec<f64>>;

    /// Hook run at the start of outer iteration `k`, before the inner loop,
    /// with the warm-start lower iterate.
    fn begin_outer(&mut self, _k: usize, _x_u: &[f64], _x_l: &[f64]) -> Result<()> {
        Ok(())
    }

    fn inner_step(&self, x_u: &[f64], x_l: &[f64], alpha: f64) -> Result<Vec<f64>> {
        let g = self.lower_grad(x_u, x_l)?;
        Ok(x_l.iter().zip(g).map(|(x, g)| x - alpha * g).collect())
    }

    fn outer_step(&mut self, x_u: &[f64], x_l: &[f64], beta: f64) -> Result<Vec<f64>> {
        let g = self.upper_grad(x_u, x_l)?;
        Ok(x_u.iter().zip(g).map(|(x, g)| x - beta * g).collect())
    }
}

pub type ScalarFn = Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
pub type GradFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// Unconstrained bilevel problem given by closures for both objectives and
/// all four partial gradients.
pub struct BilevelProblem {
    upper_dim: usize,
    lower_dim: usize,
    upper_fn: ScalarFn,
    lower_fn: ScalarFn,
    upper_grad_u: GradFn,
    upper_grad_l: GradFn,
    lower_grad_u: GradFn,
    lower_grad_l: GradFn,
}

const PROBES: usize = 4;
const PROBE_STEP: f64 = 1e-6;
const PROBE_TOL: f64 = 1e-4;

impl BilevelProblem {
    /// Builds the problem and checks every gradient oracle against central
    /// differences at a few random points in `[-1, 1]^d`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        upper_dim: usize,
        lower_dim: usize,
        upper_fn: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        lower_fn: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        upper_grad_u: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        upper_grad_l: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        lower_grad_u: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        lower_grad_l: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if upper_dim == 0 || lower_dim == 0 {
            return Err(Error::invalid("bilevel dimensions must be at least 1"));
        }
        let problem = Self {
            upper_dim,
            lower_dim,
            upper_fn: Box::new(upper_fn),
            lower_fn: Box::new(lower_fn),
            upper_grad_u: Box::new(upper_grad_u),
            upper_grad_l: Box::new(upper_grad_l),
            lower_grad_u: Box::new(lower_grad_u),
            lower_grad_l: Box::new(lower_grad_l),
        };
        problem.check_oracles()?;
        Ok(problem)
    }

    fn check_oracles(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x00b1_1e7e);
        for _ in 0..PROBES {
            let u: Vec<f64> = (0..self.upper_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let l: Vec<f64> = (0..self.lower_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            for (name, f, grad, wrt_upper) in [
                ("upper/x_u", &self.upper_fn, &self.upper_grad_u, true),
                ("upper/x_l", &self.upper_fn, &self.upper_grad_l, false),
                ("lower/x_u", &self.lower_fn, &self.lower_grad_u, true),
                ("lower/x_l", &self.lower_fn, &self.lower_grad_l, false),
            ] {
                let g = grad(&u, &l);
                let dim = if wrt_upper {
                    self.upper_dim
                } else {
                    self.lower_dim
                };
                if g.len() != dim {
                    return Err(Error::invalid(format!(
                        "{name} gradient has {} entries, expected {dim}",
                        g.len()
                    )));
                }
                for i in 0..dim {
                    let (mut up, mut lp) = (u.clone(), l.clone());
                    let (mut um, mut lm) = (u.clone(), l.clone());
                    if wrt_upper {
                        up[i] += PROBE_STEP;
                        um[i] -= PROBE_STEP;
                    } else {
                        lp[i] += PROBE_STEP;
                        lm[i] -= PROBE_STEP;
                    }
                    let fd = (f(&up, &lp) - f(&um, &lm)) / (2.0 * PROBE_STEP);
                    if !fd.is_finite() || (fd - g[i]).abs() > PROBE_TOL * g[i].abs().max(1.0) {
                        return Err(Error::invalid(format!(
                            "{name} gradient entry {i} is {} but finite differences give {fd}",
                            g[i]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn upper_grad_l(&self, x_u: &[f64], x_l: &[f64]) -> Vec<f64> {
        (self.upper_grad_l)(x_u, x_l)
    }

    pub fn lower_grad_u(&self, x_u: &[f64], x_l: &[f64]) -> Vec<f64> {
        (self.lower_grad_u)(x_u, x_l)
    }
}

impl BilevelObjective for BilevelProblem {
    fn upper_dim(&self) -> usize {
        self.upper_dim
    }

    fn lower_dim(&self) -> usize {
        self.lower_dim
    }

    fn upper_value(&self, x_u: &[f64], x_l: &[f64]) -> Result<f64> {
        Ok((self.upper_fn)(x_u, x_l))
    }

    fn lower_value(&self, x_u: &[f64], x_l: &[f64]) -> Result<f64> {
        Ok((self.lower_fn)(x_u, x_l))
    }

    fn lower_grad(&self, x_u: &[f64], x_l: &[f64]) -> Result<Vec<f64>> {
        Ok((self.lower_grad_l)(x_u, x_l))
    }

    fn upper_grad(&self, x_u: &[f64], x_l: &[f64]) -> Result<Vec<f64>> {
        Ok((self.upper_grad_u)(x_u, x_l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inconsistent_oracle_is_rejected() {
        let bad = BilevelProblem::new(
            1,
            1,
            |u, _| u[0] * u[0],
            |_, l| l[0] * l[0],
            |u, _| vec![3.0 * u[0]],
            |_, _| vec![0.0],
            |_, _| vec![0.0],
            |_, l| vec![2.0 * l[0]],
        );
        assert!(bad.is_err());
        let wrong_len = BilevelProblem::new(
            1,
            1,
            |u, _| u[0] * u[0],
            |_, l| l[0] * l[0],
            |u, _| vec![2.0 * u[0]],
            |_, _| vec![0.0, 0.0],
            |_, _| vec![0.0],
            |_, l| vec![2.0 * l[0]],
        );
        assert!(wrong_len.is_err());
    }
}
