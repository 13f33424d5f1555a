//! Synthetic two-tower task with a planted shortcut.
//!
//! Class directions live in a transferable subspace `Q`. Training images also
//! carry a class-specific code in an orthogonal shortcut subspace `S`; test
//! images do not, so the shortcut coordinates there are pure isotropic noise and
//! carry no label information. A model that leans on `S` during training moves
//! held-out features into directions the frozen cloud barely occupies.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::sphere::{dot, normalize};

const MAX_RESAMPLES: usize = 16;

/// RNG stream reserved for task generation.
const TASK_STREAM: u64 = 0x7461_736b;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub transferable_rank: usize,
    pub shortcut_rank: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub shortcut_strength: f64,
    pub noise_std: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            dim: 64,
            transferable_rank: 8,
            shortcut_rank: 8,
            train_per_class: 16,
            test_per_class: 64,
            shortcut_strength: 0.6,
            noise_std: 0.1,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidParameter(
                "num_classes and per-class sample counts must be positive".into(),
            ));
        }
        if self.dim < 2 {
            return Err(Error::InvalidParameter(format!("dim {} must be at least 2", self.dim)));
        }
        if self.transferable_rank == 0 || self.shortcut_rank == 0 {
            return Err(Error::RankConflict("subspace ranks must be positive".into()));
        }
        if self.transferable_rank + self.shortcut_rank > self.dim {
            return Err(Error::RankConflict(format!(
                "transferable rank {} + shortcut rank {} exceeds dim {}",
                self.transferable_rank, self.shortcut_rank, self.dim
            )));
        }
        if !(0.0..1.0).contains(&self.shortcut_strength) {
            return Err(Error::InvalidParameter(format!(
                "shortcut_strength {} outside [0, 1)",
                self.shortcut_strength
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise_std {} must be non-negative",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// A materialized task: bases, class geometry and frozen features.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub transferable_basis: DMatrix<f64>,
    pub shortcut_basis: DMatrix<f64>,
    /// `C × d` unnormalized class directions (unit vectors inside `Q`).
    pub class_directions: Vec<Vec<f64>>,
    /// `C × d` shortcut codes (unit vectors inside `S`).
    pub shortcut_codes: Vec<Vec<f64>>,
    pub train_vis: FeatureMatrix,
    pub train_labels: Vec<usize>,
    pub test_vis: FeatureMatrix,
    pub test_labels: Vec<usize>,
    /// Frozen text feature per class.
    pub text: FeatureMatrix,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Orthonormal `d × k` basis from Gram-Schmidt on Gaussian draws.
fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize, k: usize) -> DMatrix<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v = gaussian_vec(rng, d);
        for _ in 0..2 {
            for c in &cols {
                let p = dot(c, &v);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            cols.push(v);
        }
    }
    DMatrix::from_fn(d, k, |r, c| cols[c][r])
}

/// Unit vector `B a` for a random unit `a` in the column space of `B`.
fn random_in_span(rng: &mut ChaCha8Rng, basis: &DMatrix<f64>) -> Vec<f64> {
    loop {
        let a = gaussian_vec(rng, basis.ncols());
        if let Ok(a) = normalize(&a) {
            let v = basis * nalgebra::DVector::from_column_slice(a.as_slice());
            return v.as_slice().to_vec();
        }
    }
}

fn noisy_unit(rng: &mut ChaCha8Rng, mean: &[f64], noise: &Normal<f64>) -> Result<Vec<f64>> {
    let mut last = None;
    for _ in 0..MAX_RESAMPLES {
        let x: Vec<f64> = mean.iter().map(|m| m + noise.sample(rng)).collect();
        match normalize(&x) {
            Ok(u) => return Ok(u.into_inner()),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

fn split(
    rng: &mut ChaCha8Rng,
    spec: &TaskSpec,
    directions: &[Vec<f64>],
    codes: Option<&[Vec<f64>]>,
    per_class: usize,
    noise: &Normal<f64>,
) -> Result<(FeatureMatrix, Vec<usize>)> {
    let d = spec.dim;
    let mut data = Vec::with_capacity(spec.num_classes * per_class * d);
    let mut labels = Vec::with_capacity(spec.num_classes * per_class);
    for c in 0..spec.num_classes {
        let mut mean = directions[c].clone();
        if let Some(codes) = codes {
            mean.iter_mut()
                .zip(&codes[c])
                .for_each(|(m, s)| *m += spec.shortcut_strength * s);
        }
        for _ in 0..per_class {
            data.extend(noisy_unit(rng, &mean, noise)?);
            labels.push(c);
        }
    }
    let n = labels.len();
    Ok((FeatureMatrix::new_normalized(data, n, d)?, labels))
}

/// Deterministically generates a task from `spec` and `seed`.
pub fn generate_task(spec: &TaskSpec, seed: u64) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TASK_STREAM);
    let d = spec.dim;
    let joint = random_orthonormal(&mut rng, d, spec.transferable_rank + spec.shortcut_rank);
    let transferable_basis = joint.columns(0, spec.transferable_rank).clone_owned();
    let shortcut_basis = joint
        .columns(spec.transferable_rank, spec.shortcut_rank)
        .clone_owned();

    let class_directions: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| random_in_span(&mut rng, &transferable_basis))
        .collect();
    let shortcut_codes: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| random_in_span(&mut rng, &shortcut_basis))
        .collect();

    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| Error::InvalidParameter(format!("noise_std: {e}")))?;
    let (train_vis, train_labels) = split(
        &mut rng,
        spec,
        &class_directions,
        Some(&shortcut_codes),
        spec.train_per_class,
        &noise,
    )?;
    let (test_vis, test_labels) =
        split(&mut rng, spec, &class_directions, None, spec.test_per_class, &noise)?;
    let mut text = Vec::with_capacity(spec.num_classes * d);
    for dir in &class_directions {
        text.extend(noisy_unit(&mut rng, dir, &noise)?);
    }
    let text = FeatureMatrix::new_normalized(text, spec.num_classes, d)?;

    Ok(SyntheticTask {
        spec: *spec,
        transferable_basis,
        shortcut_basis,
        class_directions,
        shortcut_codes,
        train_vis,
        train_labels,
        test_vis,
        test_labels,
        text,
    })
}
