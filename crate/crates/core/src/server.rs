//! Parameter-server side of a round: gradient-norm targets, the auxiliary
//! balancing loss over the per-task loss weights, the weight update with
//! renormalization, and weighted aggregation of client gradients.
//!
//! For task `i` with loss weight `pᵢ` and tail gradient norm `nᵢ`, the
//! weighted norm is `Gᵢ = pᵢ·nᵢ`. Its target is `Ḡ·rᵢ^γ`, where `Ḡ` is the
//! mean weighted norm and `rᵢ` the task's inverse training rate relative to
//! the mean. The balancing loss `Σᵢ |Gᵢ − targetᵢ|` is minimized over the
//! weights with the targets held constant.

use std::fmt;
use std::str::FromStr;

use log::warn;

use crate::client::GradReport;
use crate::error::{Error, Result};
use crate::numerics::{Gradient, ParamVector};

/// Smallest value a loss weight may take after an update.
pub const WEIGHT_FLOOR: f64 = 1e-3;

/// Tolerance on `Σp = N`.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Relative distance from a target below which a task counts as sitting on
/// the kink of `|·|`.
const KINK_REL_TOL: f64 = 1e-12;

/// Per-task loss weights: positive, summing to the number of tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    p: Vec<f64>,
}

impl LossWeights {
    pub fn uniform(n: usize) -> Self {
        Self { p: vec![1.0; n] }
    }

    pub fn new(p: Vec<f64>) -> Result<Self> {
        let w = Self { p };
        w.check()?;
        Ok(w)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.p.len() as f64;
        if self.p.is_empty() {
            return Err(Error::invalid("no loss weights"));
        }
        if self.p.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("loss weight"));
        }
        let sum: f64 = self.p.iter().sum();
        if (sum - n).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!(
                "loss weights sum to {sum}, expected {n}"
            )));
        }
        if let Some(min) = self.p.iter().copied().reduce(f64::min) {
            if min < WEIGHT_FLOOR {
                return Err(Error::invalid(format!(
                    "loss weight {min} below floor {WEIGHT_FLOOR}"
                )));
            }
        }
        Ok(())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradNormTargets {
    /// `Gᵢ = pᵢ·nᵢ` at the weights the targets were built from.
    pub weighted_norms: Vec<f64>,
    pub mean_norm: f64,
    pub rel_rates: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Which penalty is applied to each task's deviation from its target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FgradNorm {
    #[default]
    L1,
    SquaredL2,
}

impl FromStr for FgradNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" | "abs" => Ok(FgradNorm::L1),
            "l2" | "squared_l2" | "sq" => Ok(FgradNorm::SquaredL2),
            other => Err(Error::invalid(format!(
                "unknown balancing penalty `{other}`"
            ))),
        }
    }
}

impl fmt::Display for FgradNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FgradNorm::L1 => "l1",
            FgradNorm::SquaredL2 => "squared_l2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightingStrategy {
    #[default]
    FedGradNorm,
    /// Every weight fixed at 1.
    Equal,
}

impl FromStr for WeightingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fedgradnorm" | "gradnorm" => Ok(WeightingStrategy::FedGradNorm),
            "equal" | "fedrep" => Ok(WeightingStrategy::Equal),
            other => Err(Error::invalid(format!("unknown strategy `{other}`"))),
        }
    }
}

impl fmt::Display for WeightingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightingStrategy::FedGradNorm => "fedgradnorm",
            WeightingStrategy::Equal => "equal",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub gamma: f64,
    /// Step size of the weight update.
    pub alpha: f64,
    /// Step size of the shared-network update.
    pub beta: f64,
    pub fgrad_norm: FgradNorm,
    /// Weight-update steps per round, all against the same frozen targets.
    pub weight_steps: usize,
}

impl ServerConfig {
    pub fn new(gamma: f64, alpha: f64, beta: f64) -> Self {
        Self {
            gamma,
            alpha,
            beta,
            fgrad_norm: FgradNorm::L1,
            weight_steps: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_steps == 0 {
            return Err(Error::invalid("weight_steps must be at least 1"));
        }
        Ok(())
    }
}

fn check_reports(reports: &[GradReport], weights: &LossWeights) -> Result<()> {
    if reports.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} reports for {} weights",
            reports.len(),
            weights.len()
        )));
    }
    for (i, r) in reports.iter().enumerate() {
        if r.client_id != i {
            return Err(Error::invalid(format!(
                "report at position {i} comes from client {}",
                r.client_id
            )));
        }
        if !r.tail_norm.is_finite() || !r.inverse_rate.is_finite() || !r.raw_loss.is_finite() {
            return Err(Error::non_finite(format!("report from client {i}")));
        }
        if r.tail_norm < 0.0 || r.inverse_rate <= 0.0 {
            return Err(Error::invalid(format!(
                "report from client {i} has invalid norm or rate"
            )));
        }
    }
    Ok(())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Builds this round's desired weighted gradient norms.
pub fn compute_targets(
    reports: &[GradReport],
    weights: &LossWeights,
    gamma: f64,
) -> Result<GradNormTargets> {
    if reports.len() < 2 {
        return Err(Error::invalid(
            "gradient balancing needs at least two tasks",
        ));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    check_reports(reports, weights)?;
    let weighted_norms: Vec<f64> = reports
        .iter()
        .zip(weights.as_slice())
        .map(|(r, p)| p * r.tail_norm)
        .collect();
    let mean_norm = mean(&weighted_norms);
    let rates: Vec<f64> = reports.iter().map(|r| r.inverse_rate).collect();
    let mean_rate = mean(&rates);
    let rel_rates: Vec<f64> = rates.iter().map(|f| f / mean_rate).collect();
    let targets = rel_rates
        .iter()
        .map(|r| mean_norm * r.powf(gamma))
        .collect();
    Ok(GradNormTargets {
        weighted_norms,
        mean_norm,
        rel_rates,
        targets,
    })
}

fn deviations(reports: &[GradReport], p: &[f64], targets: &GradNormTargets) -> Result<Vec<f64>> {
    if p.len() != reports.len() {
        return Err(Error::invalid(format!(
            "{} reports for {} weights",
            reports.len(),
            p.len()
        )));
    }
    if targets.targets.len() != reports.len() {
        return Err(Error::invalid("target count differs from report count"));
    }
    if targets.targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::non_finite("gradient-norm target"));
    }
    Ok(reports
        .iter()
        .zip(p)
        .zip(&targets.targets)
        .map(|((r, p), t)| {
            let actual = p * r.tail_norm;
            let diff = actual - t;
            if diff.abs() <= KINK_REL_TOL * actual.abs().max(t.abs()) {
                0.0
            } else {
                diff
            }
        })
        .collect())
}

impl FgradNorm {
    /// Balancing loss at `weights` with `targets` frozen.
    pub fn value(
        self,
        reports: &[GradReport],
        weights: &LossWeights,
        targets: &GradNormTargets,
    ) -> Result<f64> {
        check_reports(reports, weights)?;
        self.value_at(reports, weights.as_slice(), targets)
    }

    /// [`FgradNorm::value`] at an arbitrary weight vector, which need not
    /// satisfy the [`LossWeights`] invariants.
    pub fn value_at(
        self,
        reports: &[GradReport],
        p: &[f64],
        targets: &GradNormTargets,
    ) -> Result<f64> {
        let dev = deviations(reports, p, targets)?;
        Ok(match self {
            FgradNorm::L1 => dev.iter().map(|d| d.abs()).sum(),
            FgradNorm::SquaredL2 => dev.iter().map(|d| d * d).sum(),
        })
    }

    /// Derivative of [`FgradNorm::value`] with respect to each weight, targets
    /// frozen. The subgradient at the kink is 0.
    pub fn gradient(
        self,
        reports: &[GradReport],
        weights: &LossWeights,
        targets: &GradNormTargets,
    ) -> Result<Vec<f64>> {
        check_reports(reports, weights)?;
        self.gradient_at(reports, weights.as_slice(), targets)
    }

    /// [`FgradNorm::gradient`] at an arbitrary weight vector.
    pub fn gradient_at(
        self,
        reports: &[GradReport],
        p: &[f64],
        targets: &GradNormTargets,
    ) -> Result<Vec<f64>> {
        let dev = deviations(reports, p, targets)?;
        Ok(reports
            .iter()
            .zip(dev)
            .map(|(r, d)| match self {
                FgradNorm::L1 => {
                    if d == 0.0 {
                        0.0
                    } else {
                        r.tail_norm * d.signum()
                    }
                }
                FgradNorm::SquaredL2 => 2.0 * d * r.tail_norm,
            })
            .collect())
    }
}

/// `Σᵢ |pᵢ·nᵢ − targetᵢ|` with targets frozen.
pub fn fgrad_value(
    reports: &[GradReport],
    weights: &LossWeights,
    targets: &GradNormTargets,
) -> Result<f64> {
    FgradNorm::L1.value(reports, weights, targets)
}

/// `∂/∂pᵢ Σⱼ |pⱼ·nⱼ − targetⱼ| = nᵢ·sign(pᵢ·nᵢ − targetᵢ)`, targets frozen.
pub fn fgrad_gradient(
    reports: &[GradReport],
    weights: &LossWeights,
    targets: &GradNormTargets,
) -> Result<Vec<f64>> {
    FgradNorm::L1.gradient(reports, weights, targets)
}

/// Positive rescale so the weights sum to their count, holding any entry
/// that would fall below [`WEIGHT_FLOOR`] at the floor.
pub fn renormalize(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::invalid("no loss weights"));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("loss weight"));
    }
    let n = raw.len();
    if raw.iter().all(|&v| v <= WEIGHT_FLOOR) {
        warn!("every loss weight hit the floor; resetting to uniform");
        return Ok(vec![1.0; n]);
    }
    let clamped: Vec<f64> = raw.iter().map(|&v| v.max(WEIGHT_FLOOR)).collect();
    let mut pinned = vec![false; n];
    loop {
        let free_sum: f64 = clamped
            .iter()
            .zip(&pinned)
            .filter(|(_, &pin)| !pin)
            .map(|(v, _)| v)
            .sum();
        let pinned_count = pinned.iter().filter(|&&p| p).count();
        let budget = n as f64 - WEIGHT_FLOOR * pinned_count as f64;
        let scale = budget / free_sum;
        let mut changed = false;
        for i in 0..n {
            if !pinned[i] && clamped[i] * scale < WEIGHT_FLOOR {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            return Ok(clamped
                .iter()
                .zip(&pinned)
                .map(|(&v, &pin)| if pin { WEIGHT_FLOOR } else { v * scale })
                .collect());
        }
    }
}

/// One gradient step on the weights followed by renormalization.
pub fn update_weights(weights: &LossWeights, grad: &[f64], alpha: f64) -> Result<LossWeights> {
    if grad.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} gradient entries for {} weights",
            grad.len(),
            weights.len()
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if grad.iter().all(|&g| g == 0.0) {
        return Ok(weights.clone());
    }
    let stepped: Vec<f64> = weights
        .as_slice()
        .iter()
        .zip(grad)
        .map(|(p, g)| p - alpha * g)
        .collect();
    Ok(LossWeights {
        p: renormalize(&stepped)?,
    })
}

/// `ω − β·(1/N)·Σᵢ pᵢ·gᵢ`, summing clients in index order.
pub fn aggregate_and_step(
    shared: &ParamVector,
    reports: &[GradReport],
    weights: &LossWeights,
    beta: f64,
) -> Result<ParamVector> {
    if reports.len() != weights.len() || reports.is_empty() {
        return Err(Error::invalid(format!(
            "{} reports for {} weights",
            reports.len(),
            weights.len()
        )));
    }
    let mut sum = Gradient::zeros(shared.layout().clone());
    for (i, (r, &p)) in reports.iter().zip(weights.as_slice()).enumerate() {
        if r.client_id != i {
            return Err(Error::invalid(format!(
                "report at position {i} comes from client {}",
                r.client_id
            )));
        }
        sum.add_scaled(&r.avg_grad, p)?;
    }
    sum.scale(1.0 / reports.len() as f64);
    let mut next = shared.clone();
    next.descend(&sum, beta)?;
    Ok(next)
}

/// Server-side quantities of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerRoundMetrics {
    /// Targets and weighted norms, built from the weights entering the round.
    pub targets: GradNormTargets,
    /// Balancing loss at the weights entering the round.
    pub fgrad: f64,
    /// Weights used for aggregation (after the update).
    pub weights: Vec<f64>,
}

/// The server block of a round: targets, weight update, aggregation, step.
pub fn run_round(
    strategy: WeightingStrategy,
    shared: &ParamVector,
    reports: &[GradReport],
    weights: &LossWeights,
    cfg: &ServerConfig,
) -> Result<(ParamVector, LossWeights, ServerRoundMetrics)> {
    cfg.validate()?;
    let targets = compute_targets(reports, weights, cfg.gamma)?;
    let fgrad = cfg.fgrad_norm.value(reports, weights, &targets)?;
    let next_weights = match strategy {
        WeightingStrategy::Equal => LossWeights::uniform(reports.len()),
        WeightingStrategy::FedGradNorm => {
            let mut w = weights.clone();
            for _ in 0..cfg.weight_steps {
                let grad = cfg.fgrad_norm.gradient(reports, &w, &targets)?;
                w = update_weights(&w, &grad, cfg.alpha)?;
            }
            w
        }
    };
    let next_shared = aggregate_and_step(shared, reports, &next_weights, cfg.beta)?;
    let metrics = ServerRoundMetrics {
        targets,
        fgrad,
        weights: next_weights.as_slice().to_vec(),
    };
    Ok((next_shared, next_weights, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Layout, MlpSpec};
    use std::sync::Arc;

    fn layout() -> Arc<Layout> {
        Arc::new(Layout::for_spec(&MlpSpec::linear(1, 1).unwrap()))
    }

    fn report(id: usize, tail_norm: f64, inverse_rate: f64) -> GradReport {
        // Single-layer network: the whole gradient is the tail.
        let grad = Gradient::new(vec![tail_norm, 0.0], layout()).unwrap();
        GradReport {
            client_id: id,
            avg_grad: grad,
            tail_norm,
            inverse_rate,
            raw_loss: inverse_rate,
            loss_floored: false,
        }
    }

    #[test]
    fn symmetric_reports_give_unit_rates() {
        let reports: Vec<_> = (0..3).map(|i| report(i, 0.7, 0.4)).collect();
        let t = compute_targets(&reports, &LossWeights::uniform(3), 0.9).unwrap();
        for i in 0..3 {
            assert!((t.rel_rates[i] - 1.0).abs() < 1e-15);
            assert!((t.targets[i] - 0.7).abs() < 1e-15);
        }
        let g = fgrad_gradient(&reports, &LossWeights::uniform(3), &t).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn zero_gamma_targets_equal_mean() {
        let reports = vec![report(0, 1.0, 3.0), report(1, 2.0, 0.5)];
        let t = compute_targets(&reports, &LossWeights::uniform(2), 0.0).unwrap();
        assert_eq!(t.targets, vec![1.5, 1.5]);
    }

    #[test]
    fn hand_computed_targets() {
        let reports = vec![report(0, 1.0, 2.0), report(1, 1.0, 1.0)];
        let t = compute_targets(&reports, &LossWeights::uniform(2), 1.0).unwrap();
        assert_eq!(t.mean_norm, 1.0);
        assert!((t.rel_rates[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((t.rel_rates[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((t.targets[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((t.targets[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn fgrad_value_examples() {
        let reports = vec![report(0, 1.0, 1.0), report(1, 1.0, 1.0)];
        let w = LossWeights::uniform(2);
        let mut t = compute_targets(&reports, &w, 0.5).unwrap();
        assert_eq!(fgrad_value(&reports, &w, &t).unwrap(), 0.0);
        t.targets[1] -= 0.5;
        assert_eq!(fgrad_value(&reports, &w, &t).unwrap(), 0.5);
        assert_eq!(FgradNorm::SquaredL2.value(&reports, &w, &t).unwrap(), 0.25);
    }

    #[test]
    fn l1_derivative_is_the_tail_norm() {
        let reports = vec![report(0, 3.0, 1.0), report(1, 3.0, 1.0)];
        let w = LossWeights::uniform(2);
        let t = GradNormTargets {
            weighted_norms: vec![3.0, 3.0],
            mean_norm: 3.0,
            rel_rates: vec![1.0, 1.0],
            targets: vec![2.0, 4.0],
        };
        assert_eq!(fgrad_gradient(&reports, &w, &t).unwrap(), vec![3.0, -3.0]);
    }

    #[test]
    fn zero_gradient_leaves_weights_untouched() {
        let w = LossWeights::new(vec![1.2, 0.3, 1.5]).unwrap();
        assert_eq!(update_weights(&w, &[0.0; 3], 0.1).unwrap(), w);
    }

    #[test]
    fn renormalize_rescales_and_floors() {
        assert_eq!(
            renormalize(&[2.0, 1.0, 1.0]).unwrap(),
            vec![1.5, 0.75, 0.75]
        );
        let out = renormalize(&[-5.0, 1.0, 3.0]).unwrap();
        assert_eq!(out[0], WEIGHT_FLOOR);
        assert!((out.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        // An entry that only drops below the floor after rescaling is pinned too.
        let out = renormalize(&[0.0011, 50.0, 50.0]).unwrap();
        assert!(out.iter().all(|&v| v >= WEIGHT_FLOOR));
        assert!((out.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        assert_eq!(renormalize(&[-1.0, -2.0]).unwrap(), vec![1.0, 1.0]);
        assert!(renormalize(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn task_under_target_gains_weight() {
        // Task 0 lags (higher inverse rate) and has the smaller gradient norm.
        let reports = vec![report(0, 0.5, 2.0), report(1, 2.0, 1.0)];
        let w = LossWeights::uniform(2);
        let t = compute_targets(&reports, &w, 1.0).unwrap();
        assert!(t.weighted_norms[0] < t.targets[0]);
        let g = fgrad_gradient(&reports, &w, &t).unwrap();
        let alpha = 0.01;
        let raw0 = w.as_slice()[0] - alpha * g[0];
        assert!(raw0 > 1.0);
        let next = update_weights(&w, &g, alpha).unwrap();
        assert!(next.as_slice()[0] > next.as_slice()[1]);
    }

    #[test]
    fn single_client_aggregation() {
        let shared = ParamVector::new(vec![1.0, 2.0], layout()).unwrap();
        let r = report(0, 0.5, 1.0);
        let next = aggregate_and_step(&shared, &[r], &LossWeights::uniform(1), 0.1).unwrap();
        assert_eq!(next.values(), &[1.0 - 0.1 * 0.5, 2.0]);
    }

    #[test]
    fn zero_gradients_leave_shared_unchanged() {
        let shared = ParamVector::new(vec![1.0, 2.0], layout()).unwrap();
        let reports = vec![report(0, 0.0, 1.0), report(1, 0.0, 1.0)];
        let next = aggregate_and_step(&shared, &reports, &LossWeights::uniform(2), 0.1).unwrap();
        assert_eq!(next, shared);
    }

    #[test]
    fn out_of_order_reports_are_rejected() {
        let shared = ParamVector::new(vec![1.0, 2.0], layout()).unwrap();
        let reports = vec![report(1, 1.0, 1.0), report(0, 1.0, 1.0)];
        assert!(aggregate_and_step(&shared, &reports, &LossWeights::uniform(2), 0.1).is_err());
        assert!(compute_targets(&reports, &LossWeights::uniform(2), 1.0).is_err());
    }

    #[test]
    fn equal_strategy_keeps_unit_weights() {
        let shared = ParamVector::new(vec![1.0, 2.0], layout()).unwrap();
        let reports = vec![report(0, 0.5, 2.0), report(1, 2.0, 1.0)];
        let cfg = ServerConfig::new(0.9, 0.1, 0.01);
        let (_, w, m) = run_round(
            WeightingStrategy::Equal,
            &shared,
            &reports,
            &LossWeights::uniform(2),
            &cfg,
        )
        .unwrap();
        assert_eq!(w.as_slice(), &[1.0, 1.0]);
        assert_eq!(m.weights, vec![1.0, 1.0]);
        let (_, w, _) = run_round(
            WeightingStrategy::FedGradNorm,
            &shared,
            &reports,
            &LossWeights::uniform(2),
            &cfg,
        )
        .unwrap();
        assert!(w.as_slice()[0] > w.as_slice()[1]);
    }

    #[test]
    fn parse_tags() {
        assert_eq!(
            "equal".parse::<WeightingStrategy>().unwrap(),
            WeightingStrategy::Equal
        );
        assert_eq!(
            "FedGradNorm".parse::<WeightingStrategy>().unwrap(),
            WeightingStrategy::FedGradNorm
        );
        assert!("adam".parse::<WeightingStrategy>().is_err());
        assert_eq!("l2".parse::<FgradNorm>().unwrap(), FgradNorm::SquaredL2);
    }
}
