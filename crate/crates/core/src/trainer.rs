//! Full-batch gradient descent on the consistency-regularized objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bounds::non_opposition_margins;
use crate::drift::{manifold_drift, DriftReport};
use crate::error::{Error, Result};
use crate::losses::{build_prototypes, forward, grad_total, logits, LossBreakdown, Objective, PrototypeBank, TrainBatch};
use crate::matrix::FeatureMatrix;
use crate::prompt::PromptParams;
use crate::sphere::{dot, normalize, DEFAULT_OPPOSITION_MARGIN};
use crate::task::SyntheticTask;

const INIT_STREAM: u64 = 1;
const PROTOTYPE_STREAM: u64 = 2;

/// Noisy replicas per class standing in for a description bank.
pub const PROTOTYPE_REPLICAS: usize = 4;
pub const PROTOTYPE_NOISE_STD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub lambda: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub d_pca_report: usize,
    pub init_std: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lambda: 12.0,
            tau: 20.0,
            learning_rate: 0.05,
            epochs: 6000,
            seed: 0,
            d_pca_report: 8,
            init_std: 0.2,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidParameter(what));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be non-negative", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.d_pca_report == 0 {
            return bad("d_pca_report must be at least 1".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Held-out and training-set statistics at one parameter setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub drift: DriftReport,
    /// Mean `⟨f_vis, z_vis⟩` over the held-out split.
    pub mean_alignment: f64,
    /// `min (1 + ⟨z_vis, h_vis⟩)` over the held-out split.
    pub kappa_min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    /// Objective at the start of each epoch, before its update.
    pub history: Vec<LossBreakdown>,
    pub final_loss: LossBreakdown,
    pub evaluation: Evaluation,
    pub params: PromptParams,
}

/// Prototype bank from noisy copies of each frozen text feature.
pub fn task_prototypes(task: &SyntheticTask, seed: u64) -> Result<PrototypeBank> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PROTOTYPE_STREAM);
    let noise = Normal::new(0.0, PROTOTYPE_NOISE_STD).expect("constant std is valid");
    let mut classes = Vec::with_capacity(task.text.n_rows());
    for t in task.text.rows() {
        let mut replicas = Vec::with_capacity(PROTOTYPE_REPLICAS);
        for _ in 0..PROTOTYPE_REPLICAS {
            let v: Vec<f64> = t.iter().map(|x| x + noise.sample(&mut rng)).collect();
            replicas.push(normalize(&v)?);
        }
        classes.push(replicas);
    }
    build_prototypes(classes)
}

fn accuracy(vis: &FeatureMatrix, txt: &FeatureMatrix, labels: &[usize], tau: f64) -> Result<f64> {
    let mut correct = 0usize;
    for (row, &y) in vis.rows().zip(labels) {
        if logits(row, txt, tau)?.argmax() == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy, drift, alignment and margin of `params` on `task`.
pub fn evaluate(task: &SyntheticTask, params: &PromptParams, config: &TrainerConfig) -> Result<Evaluation> {
    let train = forward(&task.train_vis, &task.text, params, DEFAULT_OPPOSITION_MARGIN)?;
    let test = forward(&task.test_vis, &task.text, params, DEFAULT_OPPOSITION_MARGIN)?;
    let train_accuracy = accuracy(&train.fused_vis, &train.fused_txt, &task.train_labels, config.tau)?;
    let test_accuracy = accuracy(&test.fused_vis, &test.fused_txt, &task.test_labels, config.tau)?;
    let drift = manifold_drift(&task.test_vis, &test.fused_vis, config.d_pca_report)?;
    let mean_alignment = test
        .fused_vis
        .rows()
        .zip(task.test_vis.rows())
        .map(|(f, z)| dot(f, z))
        .sum::<f64>()
        / task.test_vis.n_rows() as f64;
    let kappa_min = non_opposition_margins(&task.test_vis, &test.prompt_vis)?;
    Ok(Evaluation {
        train_accuracy,
        test_accuracy,
        drift,
        mean_alignment,
        kappa_min,
    })
}

/// Initial prompt parameters for `config`.
pub fn initial_params(task: &SyntheticTask, config: &TrainerConfig) -> Result<PromptParams> {
    PromptParams::random(task.spec.dim, config.init_std, &mut config.rng(INIT_STREAM))
}

/// Trains the prompt maps for `config.epochs` full-batch steps.
pub fn train(task: &SyntheticTask, config: &TrainerConfig) -> Result<TrainingReport> {
    config.validate()?;
    let bank = task_prototypes(task, config.seed)?;
    let objective = Objective::new(config.lambda, config.tau)?;
    let batch = TrainBatch {
        frozen_vis: &task.train_vis,
        frozen_txt: &task.text,
        labels: &task.train_labels,
    };
    let mut params = initial_params(task, config)?;
    let mut history = Vec::with_capacity(config.epochs);
    let wrap = |epoch: usize| move |e: Error| Error::Training { epoch, source: Box::new(e) };
    for epoch in 0..config.epochs {
        let (loss, grad) = grad_total(&batch, &bank, &objective, &params).map_err(wrap(epoch))?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite { epoch });
        }
        history.push(loss);
        params.descend(&grad, config.learning_rate);
        if !params.is_finite() {
            return Err(Error::NonFinite { epoch });
        }
    }
    let (final_loss, _) =
        grad_total(&batch, &bank, &objective, &params).map_err(wrap(config.epochs))?;
    let evaluation = evaluate(task, &params, config).map_err(wrap(config.epochs))?;
    Ok(TrainingReport {
        history,
        final_loss,
        evaluation,
        params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaRow {
    pub lambda: f64,
    pub delta: f64,
    pub mean_alignment: f64,
    pub test_accuracy: f64,
}

impl From<(f64, &Evaluation)> for LambdaRow {
    fn from((lambda, e): (f64, &Evaluation)) -> Self {
        Self {
            lambda,
            delta: e.drift.delta,
            mean_alignment: e.mean_alignment,
            test_accuracy: e.test_accuracy,
        }
    }
}

/// Trains once per `λ` on the same task and seed; runs execute on separate
/// threads and rows come back in input order.
pub fn compare_lambda(task: &SyntheticTask, base: &TrainerConfig, lambdas: &[f64]) -> Result<Vec<LambdaRow>> {
    let results: Vec<Result<TrainingReport>> = std::thread::scope(|scope| {
        let handles: Vec<_> = lambdas
            .iter()
            .map(|&lambda| {
                let config = TrainerConfig { lambda, ..*base };
                scope.spawn(move || train(task, &config))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });
    lambdas
        .iter()
        .zip(results)
        .map(|(&lambda, r)| r.map(|rep| LambdaRow::from((lambda, &rep.evaluation))))
        .collect()
}
