use manifold_tune::drift::manifold_drift;
use manifold_tune::losses::{forward, grad_total, Objective, TrainBatch};
use manifold_tune::sphere::DEFAULT_OPPOSITION_MARGIN;
use manifold_tune::task::{generate_task, SyntheticTask, TaskSpec};
use manifold_tune::trainer::{compare_lambda, initial_params, task_prototypes, train, LambdaRow, TrainerConfig};
use manifold_tune::FeatureMatrix;

fn default_task(seed: u64) -> SyntheticTask {
    generate_task(&TaskSpec::default(), seed).unwrap()
}

fn mean_sq_dist(a: &FeatureMatrix, b: &FeatureMatrix) -> f64 {
    a.rows()
        .zip(b.rows())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
        .sum::<f64>()
        / a.n_rows() as f64
}

#[test]
fn small_step_descent_is_monotone() {
    let task = default_task(1);
    let config = TrainerConfig {
        learning_rate: 1e-3,
        epochs: 200,
        seed: 1,
        ..TrainerConfig::default()
    };
    let report = train(&task, &config).unwrap();
    let mut series: Vec<f64> = report.history.iter().map(|l| l.total).collect();
    series.push(report.final_loss.total);
    for (t, w) in series.windows(2).enumerate() {
        assert!(w[1] <= w[0] + 1e-6, "epoch {t}: {} -> {}", w[0], w[1]);
    }
    assert!(series.last().unwrap() < &series[0]);
}

#[test]
fn fusion_contracts_at_every_epoch() {
    let task = default_task(2);
    let config = TrainerConfig {
        lambda: 0.0,
        epochs: 150,
        learning_rate: 0.5,
        seed: 2,
        ..TrainerConfig::default()
    };
    let bank = task_prototypes(&task, config.seed).unwrap();
    let objective = Objective::new(config.lambda, config.tau).unwrap();
    let batch = TrainBatch {
        frozen_vis: &task.train_vis,
        frozen_txt: &task.text,
        labels: &task.train_labels,
    };
    let mut params = initial_params(&task, &config).unwrap();
    for epoch in 0..config.epochs {
        let fwd = forward(&task.train_vis, &task.text, &params, DEFAULT_OPPOSITION_MARGIN).unwrap();
        let fused = mean_sq_dist(&fwd.fused_vis, &task.train_vis);
        let prompt = mean_sq_dist(&fwd.prompt_vis, &task.train_vis);
        assert!(fused <= 0.5 * prompt + 1e-9, "epoch {epoch}: {fused} > {prompt}/2");
        let fused_t = mean_sq_dist(&fwd.fused_txt, &task.text);
        let prompt_t = mean_sq_dist(&fwd.prompt_txt, &task.text);
        assert!(fused_t <= 0.5 * prompt_t + 1e-9, "epoch {epoch} (text)");
        let (_, grad) = grad_total(&batch, &bank, &objective, &params).unwrap();
        params.descend(&grad, config.learning_rate);
    }
    // The hand-rolled loop must be the trainer's loop.
    assert_eq!(train(&task, &config).unwrap().params, params);
}

#[test]
fn heavy_consistency_keeps_features_aligned() {
    let task = default_task(3);
    let config = TrainerConfig {
        lambda: 100.0,
        init_std: 0.02,
        epochs: 400,
        learning_rate: 0.01,
        seed: 3,
        ..TrainerConfig::default()
    };
    let report = train(&task, &config).unwrap();
    assert!(report.final_loss.con < report.history[0].con);
    assert!(report.evaluation.mean_alignment >= 0.99, "{}", report.evaluation.mean_alignment);
}

#[test]
fn margins_stay_clear_of_the_fusion_threshold() {
    let threshold = 2.0 * DEFAULT_OPPOSITION_MARGIN;
    for lambda in [0.0, 12.0] {
        let task = default_task(1);
        let config = TrainerConfig {
            lambda,
            seed: 1,
            ..TrainerConfig::default()
        };
        let report = train(&task, &config).unwrap();
        assert!(report.evaluation.kappa_min > threshold, "lambda {lambda}: {}", report.evaluation.kappa_min);
    }
}

#[test]
fn parallel_sweep_matches_sequential_runs() {
    let task = default_task(4);
    let base = TrainerConfig {
        epochs: 60,
        seed: 4,
        ..TrainerConfig::default()
    };
    let lambdas = [12.0, 0.0, 3.0];
    let rows = compare_lambda(&task, &base, &lambdas).unwrap();
    for (row, &lambda) in rows.iter().zip(&lambdas) {
        let single = train(&task, &TrainerConfig { lambda, ..base }).unwrap();
        assert_eq!(*row, LambdaRow::from((lambda, &single.evaluation)));
    }
}

#[test]
fn reported_drift_is_measured_on_held_out_features() {
    let task = default_task(5);
    let config = TrainerConfig {
        epochs: 30,
        seed: 5,
        ..TrainerConfig::default()
    };
    let report = train(&task, &config).unwrap();
    let fwd = forward(&task.test_vis, &task.text, &report.params, DEFAULT_OPPOSITION_MARGIN).unwrap();
    let oracle = manifold_drift(&task.test_vis, &fwd.fused_vis, config.d_pca_report).unwrap();
    assert_eq!(report.evaluation.drift, oracle);
    assert_eq!(report.evaluation.drift.n_samples, task.test_vis.n_rows());
}

#[test]
fn unregularized_training_drifts_on_the_shortcut_task() {
    let task = default_task(1);
    let free = train(&task, &TrainerConfig { lambda: 0.0, seed: 1, ..TrainerConfig::default() }).unwrap();
    let reg = train(&task, &TrainerConfig { lambda: 12.0, seed: 1, ..TrainerConfig::default() }).unwrap();
    assert!(free.evaluation.drift.delta > 0.0);
    assert!(reg.evaluation.drift.delta < free.evaluation.drift.delta);
}
