use fedgradnorm::bilevel::{itd_solve, BilevelProblem, FedGradNormBilevel, ItdConfig};
use fedgradnorm::client::GradReport;
use fedgradnorm::harness::{build_simulation, ExperimentConfig, TaskData};
use fedgradnorm::numerics::{Gradient, Layout, MlpSpec};
use fedgradnorm::server::{compute_targets, fgrad_gradient, update_weights, LossWeights};
use fedgradnorm::taskgen::TaskSpec;

#[test]
fn coupled_quadratic_reaches_closed_form() {
    let c = 1.0;
    let mut p = BilevelProblem::new(
        1,
        1,
        |u, l| (u[0] - l[0]).powi(2),
        move |_, l| (l[0] - c).powi(2),
        |u, l| vec![2.0 * (u[0] - l[0])],
        |u, l| vec![2.0 * (l[0] - u[0])],
        |_, _| vec![0.0],
        move |_, l| vec![2.0 * (l[0] - c)],
    )
    .unwrap();
    let cfg = ItdConfig {
        outer_iters: 200,
        inner_iters: 20,
        alpha: 0.1,
        beta: 0.1,
        x_u0: vec![4.0],
        x_l0: vec![-2.0],
    };
    let res = itd_solve(&mut p, &cfg).unwrap();
    assert!((res.x_u[0] - c).abs() <= 1e-4);
    assert!((res.x_l[0] - c).abs() <= 1e-4);
}

#[test]
fn long_inner_loop_lands_on_the_lower_argmin() {
    // g(x_u, x_l) = ½‖x_l − A x_u‖², argmin x_l = A x_u.
    let a = [[1.0, 0.5], [-0.3, 2.0], [0.0, 1.0]];
    let lower_grad = move |u: &[f64], l: &[f64]| -> Vec<f64> {
        (0..3)
            .map(|i| l[i] - (a[i][0] * u[0] + a[i][1] * u[1]))
            .collect()
    };
    let lower_grad_u = move |u: &[f64], l: &[f64]| -> Vec<f64> {
        let r: Vec<f64> = (0..3)
            .map(|i| l[i] - (a[i][0] * u[0] + a[i][1] * u[1]))
            .collect();
        (0..2)
            .map(|j| -(0..3).map(|i| a[i][j] * r[i]).sum::<f64>())
            .collect()
    };
    let mut p = BilevelProblem::new(
        2,
        3,
        |u, l| u.iter().map(|x| x * x).sum::<f64>() + l.iter().map(|x| 0.1 * x * x).sum::<f64>(),
        move |u, l| {
            0.5 * (0..3)
                .map(|i| (l[i] - (a[i][0] * u[0] + a[i][1] * u[1])).powi(2))
                .sum::<f64>()
        },
        |u, _| u.iter().map(|x| 2.0 * x).collect(),
        |_, l| l.iter().map(|x| 0.2 * x).collect(),
        lower_grad_u,
        lower_grad,
    )
    .unwrap();
    let cfg = ItdConfig {
        outer_iters: 10,
        inner_iters: 400,
        alpha: 0.1,
        beta: 0.1,
        x_u0: vec![1.0, -1.0],
        x_l0: vec![0.0; 3],
    };
    let res = itd_solve(&mut p, &cfg).unwrap();
    let mut x_u = cfg.x_u0.clone();
    for step in &res.trace {
        for (row, got) in a.iter().zip(&step.lower_end) {
            let target = row[0] * x_u[0] + row[1] * x_u[1];
            assert!((got - target).abs() <= 1e-6);
        }
        x_u = x_u.iter().map(|x| x - cfg.beta * 2.0 * x).collect();
    }
}

fn two_task_config(difficulties: [f64; 2], seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.world.input_dim = 6;
    cfg.world.repr_dim = 2;
    cfg.shared_spec =
        MlpSpec::new(vec![6, 8, 2], vec![fedgradnorm::numerics::Activation::Tanh]).unwrap();
    cfg.tasks = vec![
        TaskSpec::regression(0, difficulties[0], 40),
        TaskSpec::regression(1, difficulties[1], 40),
    ];
    cfg.head_specs = vec![MlpSpec::linear(2, 1).unwrap(); 2];
    cfg.task_data = vec![TaskData::Synthetic; 2];
    cfg.beta = 1e-2;
    cfg.seed = seed;
    cfg
}

#[test]
fn adapter_keeps_unit_weights_on_symmetric_tasks() {
    let cfg = two_task_config([1.0, 1.0], 5);
    let mut sim = build_simulation(&cfg).unwrap();
    let mut twin = sim.clients[0].clone();
    twin.id = 1;
    twin.task.task_id = 1;
    sim.clients[1] = twin;
    let mut adapter = FedGradNormBilevel::new(
        sim.clients,
        cfg.shared_spec.clone(),
        sim.shared,
        cfg.local_config(),
        cfg.server_config(),
    )
    .unwrap();
    let itd = ItdConfig {
        outer_iters: 8,
        inner_iters: 1,
        alpha: cfg.alpha,
        beta: cfg.beta,
        x_u0: adapter.initial_upper(),
        x_l0: adapter.initial_lower(),
    };
    let res = itd_solve(&mut adapter, &itd).unwrap();
    for step in &res.trace {
        assert_eq!(step.lower_end, vec![1.0, 1.0]);
    }
}

#[test]
fn adapter_rejects_a_single_client() {
    let cfg = two_task_config([2.0, 1.0], 1);
    let mut sim = build_simulation(&cfg).unwrap();
    sim.clients.truncate(1);
    let r = FedGradNormBilevel::new(
        sim.clients,
        cfg.shared_spec.clone(),
        sim.shared,
        cfg.local_config(),
        cfg.server_config(),
    );
    assert!(r.is_err());
}

#[test]
fn zero_gamma_weights_settle_at_the_balance_point() {
    let layout = std::sync::Arc::new(Layout::for_spec(&MlpSpec::linear(1, 1).unwrap()));
    let norms = [4.0, 1.0, 0.5];
    let reports: Vec<GradReport> = norms
        .iter()
        .enumerate()
        .map(|(i, &n)| GradReport {
            client_id: i,
            avg_grad: Gradient::zeros(layout.clone()),
            tail_norm: n,
            inverse_rate: 0.3 + 0.2 * i as f64,
            raw_loss: 1.0,
            loss_floored: false,
        })
        .collect();
    let alpha = 1e-4;
    let mut w = LossWeights::uniform(3);
    for _ in 0..50_000 {
        let t = compute_targets(&reports, &w, 0.0).unwrap();
        let g = fgrad_gradient(&reports, &w, &t).unwrap();
        w = update_weights(&w, &g, alpha).unwrap();
    }
    // Balance: pᵢ·nᵢ equal for all i with Σp = N, so pᵢ = c/nᵢ.
    let c = 3.0 / norms.iter().map(|n| 1.0 / n).sum::<f64>();
    let t = compute_targets(&reports, &w, 0.0).unwrap();
    for (i, &n) in norms.iter().enumerate() {
        let p = w.as_slice()[i];
        assert!(
            (p - c / n).abs() <= 10.0 * alpha * norms[0],
            "p{i} = {p}, expected {}",
            c / n
        );
        assert!((p * n - t.mean_norm).abs() <= 10.0 * alpha * norms[0] * norms[0]);
    }
}
