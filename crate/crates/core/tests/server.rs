#![allow(clippy::needless_range_loop)]

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedgradnorm::client::GradReport;
use fedgradnorm::numerics::{Gradient, Layout, MlpSpec, ParamVector};
use fedgradnorm::server::{
    aggregate_and_step, compute_targets, run_round, update_weights, FgradNorm, LossWeights,
    ServerConfig, WeightingStrategy, WEIGHT_FLOOR,
};

fn layout() -> Arc<Layout> {
    Arc::new(Layout::for_spec(&MlpSpec::linear(3, 2).unwrap()))
}

fn random_report(rng: &mut ChaCha8Rng, id: usize, layout: &Arc<Layout>) -> GradReport {
    let values: Vec<f64> = (0..layout.len())
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    let avg_grad = Gradient::new(values, layout.clone()).unwrap();
    let tail_norm = avg_grad.l2_norm();
    let raw_loss = rng.random_range(0.1..5.0);
    GradReport {
        client_id: id,
        avg_grad,
        tail_norm,
        inverse_rate: raw_loss / rng.random_range(1.0..6.0),
        raw_loss,
        loss_floored: false,
    }
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> LossWeights {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
    let s: f64 = raw.iter().sum();
    LossWeights::new(raw.iter().map(|v| v * n as f64 / s).collect()).unwrap()
}

#[test]
fn both_penalties_match_finite_differences_away_from_kinks() {
    let layout = layout();
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..6);
        let reports: Vec<_> = (0..n)
            .map(|i| random_report(&mut rng, i, &layout))
            .collect();
        let weights = random_weights(&mut rng, n);
        let targets = compute_targets(&reports, &weights, 0.9).unwrap();
        for norm in [FgradNorm::L1, FgradNorm::SquaredL2] {
            let g = norm.gradient(&reports, &weights, &targets).unwrap();
            let p = weights.as_slice();
            for i in 0..n {
                if (p[i] * reports[i].tail_norm - targets.targets[i]).abs() < 1e-4 {
                    continue;
                }
                let h = 1e-7;
                let f = |d: f64| {
                    let mut q = p.to_vec();
                    q[i] += d;
                    norm.value_at(&reports, &q, &targets).unwrap()
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0),
                    "{norm} seed {seed} i {i}"
                );
            }
        }
    }
}

#[test]
fn aggregation_matches_naive_loop_bit_for_bit() {
    let layout = layout();
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..7);
        let reports: Vec<_> = (0..n)
            .map(|i| random_report(&mut rng, i, &layout))
            .collect();
        let weights = random_weights(&mut rng, n);
        let shared = ParamVector::new(
            (0..layout.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            layout.clone(),
        )
        .unwrap();
        let beta = 0.01;
        let got = aggregate_and_step(&shared, &reports, &weights, beta).unwrap();
        for k in 0..layout.len() {
            let mut acc = 0.0;
            for i in 0..n {
                acc += weights.as_slice()[i] * reports[i].avg_grad.values()[k];
            }
            let expect = shared.values()[k] - beta * (acc * (1.0 / n as f64));
            assert_eq!(
                got.values()[k].to_bits(),
                expect.to_bits(),
                "seed {seed} entry {k}"
            );
        }
    }
}

#[test]
fn targets_follow_their_definition() {
    let layout = layout();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reports: Vec<_> = (0..4)
        .map(|i| random_report(&mut rng, i, &layout))
        .collect();
    let weights = random_weights(&mut rng, 4);
    let gamma = 0.7;
    let t = compute_targets(&reports, &weights, gamma).unwrap();
    let g: Vec<f64> = (0..4)
        .map(|i| weights.as_slice()[i] * reports[i].tail_norm)
        .collect();
    let g_bar = g.iter().sum::<f64>() / 4.0;
    let f_bar = reports.iter().map(|r| r.inverse_rate).sum::<f64>() / 4.0;
    for i in 0..4 {
        let r = reports[i].inverse_rate / f_bar;
        assert!((t.targets[i] - g_bar * r.powf(gamma)).abs() <= 1e-12 * g_bar);
        assert!((t.rel_rates[i] - r).abs() <= 1e-15);
    }
}

#[test]
fn one_round_moves_weight_toward_the_slower_task() {
    let layout = layout();
    let grad = Gradient::new(vec![1.0; layout.len()], layout.clone()).unwrap();
    let n = grad.l2_norm();
    let report = |id, rate| GradReport {
        client_id: id,
        avg_grad: grad.clone(),
        tail_norm: n,
        inverse_rate: rate,
        raw_loss: rate,
        loss_floored: false,
    };
    // Equal gradient norms; task 1 has made less relative progress.
    let reports = vec![report(0, 0.4), report(1, 0.9)];
    let shared = ParamVector::zeros(layout.clone());
    let cfg = ServerConfig::new(0.9, 4e-3, 1e-3);
    let (_, w, m) = run_round(
        WeightingStrategy::FedGradNorm,
        &shared,
        &reports,
        &LossWeights::uniform(2),
        &cfg,
    )
    .unwrap();
    assert!(w.as_slice()[1] > w.as_slice()[0]);
    assert!(m.targets.rel_rates[1] > m.targets.rel_rates[0]);
    let (_, eq, _) = run_round(
        WeightingStrategy::Equal,
        &shared,
        &reports,
        &LossWeights::uniform(2),
        &cfg,
    )
    .unwrap();
    assert_eq!(eq.as_slice(), &[1.0, 1.0]);
}

proptest! {
    #[test]
    fn updated_weights_keep_sum_and_floor(
        raw in prop::collection::vec(0.01f64..5.0, 2..9),
        grad_seed in any::<u64>(),
        alpha in 1e-4f64..10.0,
    ) {
        let n = raw.len();
        let s: f64 = raw.iter().sum();
        let weights = LossWeights::new(raw.iter().map(|v| (v * n as f64 / s).max(WEIGHT_FLOOR)).collect::<Vec<_>>());
        prop_assume!(weights.is_ok());
        let weights = weights.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(grad_seed);
        let grad: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let next = update_weights(&weights, &grad, alpha).unwrap();
        let p = next.as_slice();
        prop_assert!((p.iter().sum::<f64>() - n as f64).abs() <= 1e-9);
        prop_assert!(p.iter().all(|&v| v >= WEIGHT_FLOOR));
    }
}
