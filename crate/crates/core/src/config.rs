//! TOML run configuration.
//!
//! Every key is optional; missing keys fall back to library defaults. Unknown
//! keys are rejected, and [`RunConfig::validate`] checks every section against
//! the target type before anything runs.
//!
//! ```toml
//! [trainer]
//! lambda = 12.0
//! epochs = 6000
//!
//! [task]
//! shortcut_strength = 0.6
//!
//! [bound]
//! tau = 1.0
//! num_classes = 2
//!
//! [drift]
//! rank = 64
//! ranks = [8, 16, 32, 64]
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::bounds::BoundParams;
use crate::drift::DEFAULT_PCA_RANK;
use crate::error::{Error, Result};
use crate::task::TaskSpec;
use crate::trainer::TrainerConfig;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub d_pca_report: Option<usize>,
    pub init_std: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub num_classes: Option<usize>,
    pub dim: Option<usize>,
    pub transferable_rank: Option<usize>,
    pub shortcut_rank: Option<usize>,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub shortcut_strength: Option<f64>,
    pub noise_std: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSection {
    pub tau: Option<f64>,
    pub num_classes: Option<usize>,
    pub num_samples: Option<usize>,
    pub prompt_dim: Option<usize>,
    pub param_radius: Option<f64>,
    pub lipschitz: Option<f64>,
    pub confidence: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSection {
    pub rank: Option<usize>,
    pub ranks: Option<Vec<usize>>,
    pub per_class_cap: Option<usize>,
}

/// Resolved drift options.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DriftOptions {
    pub rank: usize,
    /// Ranks to report; always contains `rank`.
    pub ranks: Vec<usize>,
    pub per_class_cap: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub bound: BoundSection,
    #[serde(default)]
    pub drift: DriftSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn trainer_config(&self) -> Result<TrainerConfig> {
        let d = TrainerConfig::default();
        let t = &self.trainer;
        let config = TrainerConfig {
            lambda: t.lambda.unwrap_or(d.lambda),
            tau: t.tau.unwrap_or(d.tau),
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            epochs: t.epochs.unwrap_or(d.epochs),
            seed: t.seed.unwrap_or(d.seed),
            d_pca_report: t.d_pca_report.unwrap_or(d.d_pca_report),
            init_std: t.init_std.unwrap_or(d.init_std),
        };
        config.validate().map_err(config_error("trainer"))?;
        Ok(config)
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        let d = TaskSpec::default();
        let t = &self.task;
        let spec = TaskSpec {
            num_classes: t.num_classes.unwrap_or(d.num_classes),
            dim: t.dim.unwrap_or(d.dim),
            transferable_rank: t.transferable_rank.unwrap_or(d.transferable_rank),
            shortcut_rank: t.shortcut_rank.unwrap_or(d.shortcut_rank),
            train_per_class: t.train_per_class.unwrap_or(d.train_per_class),
            test_per_class: t.test_per_class.unwrap_or(d.test_per_class),
            shortcut_strength: t.shortcut_strength.unwrap_or(d.shortcut_strength),
            noise_std: t.noise_std.unwrap_or(d.noise_std),
        };
        spec.validate().map_err(config_error("task"))?;
        Ok(spec)
    }

    pub fn bound_params(&self) -> Result<BoundParams> {
        let d = BoundParams::default();
        let b = &self.bound;
        let params = BoundParams {
            tau: b.tau.unwrap_or(d.tau),
            num_classes: b.num_classes.unwrap_or(d.num_classes),
            num_samples: b.num_samples.unwrap_or(d.num_samples),
            prompt_dim: b.prompt_dim.unwrap_or(d.prompt_dim),
            param_radius: b.param_radius.unwrap_or(d.param_radius),
            lipschitz: b.lipschitz.unwrap_or(d.lipschitz),
            confidence: b.confidence.unwrap_or(d.confidence),
            epsilon: b.epsilon.unwrap_or(d.epsilon),
        };
        params.validate().map_err(config_error("bound"))?;
        Ok(params)
    }

    pub fn drift_options(&self) -> Result<DriftOptions> {
        let rank = self.drift.rank.unwrap_or(DEFAULT_PCA_RANK);
        let mut ranks = self.drift.ranks.clone().unwrap_or_default();
        if !ranks.contains(&rank) {
            ranks.insert(0, rank);
        }
        if let Some(&bad) = ranks.iter().find(|&&k| k == 0) {
            return Err(Error::Config(format!("drift: rank {bad} must be at least 1")));
        }
        if self.drift.per_class_cap == Some(0) {
            return Err(Error::Config("drift: per_class_cap must be at least 1".into()));
        }
        Ok(DriftOptions {
            rank,
            ranks,
            per_class_cap: self.drift.per_class_cap,
        })
    }

    /// Resolves every section, failing on the first invalid one.
    pub fn validate(&self) -> Result<()> {
        self.trainer_config()?;
        self.task_spec()?;
        self.bound_params()?;
        self.drift_options()?;
        Ok(())
    }
}

fn config_error(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Config(format!("{section}: {e}"))
}
