use std::io::Write;

use fedgradnorm::numerics::Matrix;
use fedgradnorm::taskgen::{
    generate_world, ingest_dataset, loss, loss_and_grad, sample_dataset, DatasetSchema,
    LabelEncoding, TaskKind, TaskSpec,
};
use fedgradnorm::Error;

#[test]
fn every_class_appears_in_generated_classification_data() {
    let specs = [
        TaskSpec::classification(0, 3, 400),
        TaskSpec::regression(1, 1.0, 10),
    ];
    for seed in 0..20 {
        let world = generate_world(10, 3, &specs, 0.0, seed).unwrap();
        let data = sample_dataset(&world, &specs[0], seed).unwrap();
        let mut counts = [0usize; 3];
        for r in 0..data.len() {
            let row = data.labels().row(r);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            counts[row.iter().position(|&v| v == 1.0).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "seed {seed}: {counts:?}");
    }
}

#[test]
fn difficulty_sets_the_true_head_norm() {
    let specs = [
        TaskSpec::regression(0, 10.0, 5),
        TaskSpec::regression(1, 1.0, 5),
    ];
    let world = generate_world(6, 2, &specs, 0.0, 9).unwrap();
    let ratio = world.true_heads[0].l2_norm() / world.true_heads[1].l2_norm();
    assert!((ratio - 10.0).abs() <= 1e-9);
}

#[test]
fn noiseless_labels_are_reproduced_by_the_generator() {
    let specs = [
        TaskSpec::regression(0, 3.0, 50),
        TaskSpec::regression(1, 1.0, 50),
    ];
    let world = generate_world(8, 3, &specs, 0.0, 4).unwrap();
    for spec in &specs {
        let data = sample_dataset(&world, spec, 4).unwrap();
        let clean = world.evaluate(spec.task_id, data.inputs()).unwrap();
        assert_eq!(&clean, data.labels());
        assert_eq!(loss(spec.kind, &clean, data.labels()).unwrap(), 0.0);
    }
}

#[test]
fn sampling_is_deterministic_in_the_seed() {
    let specs = [
        TaskSpec::regression(0, 2.0, 30),
        TaskSpec::classification(1, 4, 30),
    ];
    let a = generate_world(5, 2, &specs, 0.5, 77).unwrap();
    let b = generate_world(5, 2, &specs, 0.5, 77).unwrap();
    assert_eq!(a, b);
    for s in &specs {
        assert_eq!(
            sample_dataset(&a, s, 77).unwrap(),
            sample_dataset(&b, s, 77).unwrap()
        );
    }
    let c = generate_world(5, 2, &specs, 0.5, 78).unwrap();
    assert_ne!(a.true_shared_map, c.true_shared_map);
}

fn naive_mse(pred: &Matrix, labels: &Matrix) -> f64 {
    let mut s = 0.0;
    for r in 0..pred.rows() {
        for c in 0..pred.cols() {
            s += (pred.get(r, c) - labels.get(r, c)).powi(2);
        }
    }
    s / (pred.rows() * pred.cols()) as f64
}

fn naive_cross_entropy(logits: &Matrix, labels: &Matrix) -> f64 {
    let mut s = 0.0;
    for r in 0..logits.rows() {
        let z: f64 = logits.row(r).iter().map(|v| v.exp()).sum();
        for c in 0..logits.cols() {
            if labels.get(r, c) == 1.0 {
                s -= (logits.get(r, c).exp() / z).ln();
            }
        }
    }
    s / logits.rows() as f64
}

#[test]
fn losses_match_direct_formulas_and_ignore_row_order() {
    let pred = Matrix::from_rows(&[
        vec![0.5, -1.0, 2.0],
        vec![0.0, 0.3, -0.2],
        vec![1.5, 1.0, 0.1],
    ])
    .unwrap();
    let onehot = Matrix::from_rows(&[
        vec![0.0, 0.0, 1.0],
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
    ])
    .unwrap();
    let reg = Matrix::from_rows(&[
        vec![0.1, 0.2, 0.3],
        vec![-1.0, 0.0, 1.0],
        vec![2.0, 2.0, 2.0],
    ])
    .unwrap();
    let mse = TaskKind::Regression { outputs: 3 };
    let ce = TaskKind::Classification { classes: 3 };
    assert!((loss(mse, &pred, &reg).unwrap() - naive_mse(&pred, &reg)).abs() < 1e-14);
    assert!(
        (loss(ce, &pred, &onehot).unwrap() - naive_cross_entropy(&pred, &onehot)).abs() < 1e-14
    );

    let perm = [2, 0, 1];
    let (p2, r2, o2) = (
        pred.select_rows(&perm),
        reg.select_rows(&perm),
        onehot.select_rows(&perm),
    );
    assert!((loss(mse, &p2, &r2).unwrap() - loss(mse, &pred, &reg).unwrap()).abs() < 1e-14);
    assert!((loss(ce, &p2, &o2).unwrap() - loss(ce, &pred, &onehot).unwrap()).abs() < 1e-14);
}

#[test]
fn loss_gradients_match_central_differences() {
    let pred = Matrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.0, 0.3, -0.2]]).unwrap();
    let labels = Matrix::from_rows(&[vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap();
    for kind in [
        TaskKind::Regression { outputs: 3 },
        TaskKind::Classification { classes: 3 },
    ] {
        let (_, g) = loss_and_grad(kind, &pred, &labels).unwrap();
        for i in 0..pred.data().len() {
            let bump = |d: f64| {
                let mut v = pred.data().to_vec();
                v[i] += d;
                loss(kind, &Matrix::new(2, 3, v).unwrap(), &labels).unwrap()
            };
            let fd = (bump(1e-6) - bump(-1e-6)) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-8, "{kind:?} entry {i}");
        }
    }
}

#[test]
fn ingest_reads_named_columns_and_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.csv");
    std::fs::write(&good, "x1,label,x0\n1.0,2,0.5\n-1.0,0,0.25\n").unwrap();
    let schema = DatasetSchema {
        delimiter: b',',
        feature_columns: Some(vec!["x0".into(), "x1".into()]),
        label_columns: vec!["label".into()],
        label_encoding: LabelEncoding::OneHot { classes: 3 },
    };
    let data = ingest_dataset(&good, &schema).unwrap();
    assert_eq!(data.inputs().row(0), &[0.5, 1.0]);
    assert_eq!(data.labels().row(0), &[0.0, 0.0, 1.0]);
    assert_eq!(data.labels().row(1), &[1.0, 0.0, 0.0]);

    let bad = dir.path().join("bad.csv");
    let mut f = std::fs::File::create(&bad).unwrap();
    writeln!(f, "a,y\n1,2\n3,oops\n").unwrap();
    match ingest_dataset(&bad, &DatasetSchema::csv(vec!["y".into()])) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}
