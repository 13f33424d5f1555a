//! Randomized property checks over every module.
//!
//! Trial `t` of a run with base seed `s` draws from a generator seeded with
//! `s + t` on a per-property stream, so a failure reported at seed `k` is
//! reproduced by rerunning that suite with `--seed k --trials 1`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bounds::{check_logit_perturbation, loss_bound_b};
use crate::drift::{decompose_shift, fit_subspace, manifold_drift, max_rank, off_manifold_ratio};
use crate::error::{Error, Result};
use crate::losses::{
    build_prototypes, cross_entropy, grad_total, logits, objective_value, LogitVector, Objective, PrototypeBank,
    TrainBatch,
};
use crate::matrix::FeatureMatrix;
use crate::prompt::PromptParams;
use crate::sphere::{dot, fuse, fusion_lipschitz_check, normalize, squared_distance, FusionInput, UnitVector};

/// Signature of the fusion map under test.
pub type FuseFn = fn(&FusionInput<'_>) -> Result<UnitVector>;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;
const MAX_REPORTED_FAILURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Sphere,
    Drift,
    Bounds,
    Grad,
    All,
}

impl Suite {
    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Sphere => "sphere",
            Suite::Drift => "drift",
            Suite::Bounds => "bounds",
            Suite::Grad => "grad",
            Suite::All => "all",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Suite::Sphere),
            "drift" => Ok(Suite::Drift),
            "bounds" => Ok(Suite::Bounds),
            "grad" => Ok(Suite::Grad),
            "all" => Ok(Suite::All),
            other => Err(Error::InvalidParameter(format!(
                "unknown suite {other:?} (expected sphere, drift, bounds, grad or all)"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub trials: usize,
    pub seed: u64,
    pub fuse: FuseFn,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 1000,
            seed: 0,
            fuse,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub suite: Suite,
    pub name: &'static str,
    pub trials: usize,
    pub passed: usize,
    /// Seeds of the first failing trials.
    pub failing_seeds: Vec<u64>,
    /// First error message, if a trial errored rather than violated.
    pub first_error: Option<String>,
}

impl PropertyResult {
    pub fn ok(&self) -> bool {
        self.passed == self.trials
    }
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.ok() { "PASS" } else { "FAIL" };
        write!(f, "{status} {}/{} {}/{}", self.suite, self.name, self.passed, self.trials)?;
        if !self.ok() {
            let seeds: Vec<String> = self.failing_seeds.iter().map(u64::to_string).collect();
            write!(f, " failing seeds: {}", seeds.join(","))?;
            if let Some(e) = &self.first_error {
                write!(f, " ({e})")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.properties.iter().all(PropertyResult::ok)
    }

    pub fn failed(&self) -> impl Iterator<Item = &PropertyResult> {
        self.properties.iter().filter(|p| !p.ok())
    }

    pub fn property(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }
}

type Check = fn(&mut ChaCha8Rng, &VerifyOptions) -> Result<bool>;

struct Property {
    suite: Suite,
    name: &'static str,
    check: Check,
}

const PROPERTIES: &[Property] = &[
    Property { suite: Suite::Sphere, name: "contraction", check: contraction },
    Property { suite: Suite::Sphere, name: "alignment_closed_form", check: alignment_closed_form },
    Property { suite: Suite::Sphere, name: "fused_unit_norm", check: fused_unit_norm },
    Property { suite: Suite::Sphere, name: "sphere_identity", check: sphere_identity },
    Property { suite: Suite::Sphere, name: "fusion_lipschitz", check: fusion_lipschitz },
    Property { suite: Suite::Drift, name: "self_drift_zero", check: self_drift_zero },
    Property { suite: Suite::Drift, name: "ratio_in_unit_interval", check: ratio_in_unit_interval },
    Property { suite: Suite::Drift, name: "tail_energy", check: tail_energy },
    Property { suite: Suite::Drift, name: "shift_decomposition", check: shift_decomposition },
    Property { suite: Suite::Bounds, name: "logit_perturbation", check: logit_perturbation },
    Property { suite: Suite::Bounds, name: "cross_entropy_range", check: cross_entropy_range },
    Property { suite: Suite::Bounds, name: "cross_entropy_lipschitz", check: cross_entropy_lipschitz },
    Property { suite: Suite::Grad, name: "finite_difference", check: finite_difference },
];

/// Runs every property of `suite` for `options.trials` trials.
pub fn run(suite: Suite, options: &VerifyOptions) -> VerifyReport {
    let properties = PROPERTIES
        .iter()
        .enumerate()
        .filter(|(_, p)| suite.includes(p.suite))
        .map(|(stream, p)| run_property(p, stream as u64, options))
        .collect();
    VerifyReport { properties }
}

fn run_property(p: &Property, stream: u64, options: &VerifyOptions) -> PropertyResult {
    let mut passed = 0;
    let mut failing_seeds = Vec::new();
    let mut first_error = None;
    for t in 0..options.trials {
        let seed = options.seed.wrapping_add(t as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        match (p.check)(&mut rng, options) {
            Ok(true) => passed += 1,
            Ok(false) => {
                if failing_seeds.len() < MAX_REPORTED_FAILURES {
                    failing_seeds.push(seed);
                }
            }
            Err(e) => {
                if failing_seeds.len() < MAX_REPORTED_FAILURES {
                    failing_seeds.push(seed);
                }
                first_error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    PropertyResult {
        suite: p.suite,
        name: p.name,
        trials: options.trials,
        passed,
        failing_seeds,
        first_error,
    }
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> UnitVector {
    loop {
        if let Ok(u) = normalize(&gaussian(rng, dim)) {
            return u;
        }
    }
}

fn unit_matrix(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Result<FeatureMatrix> {
    let rows: Vec<UnitVector> = (0..n).map(|_| unit(rng, dim)).collect();
    if n == 0 {
        return FeatureMatrix::new(Vec::new(), 0, dim);
    }
    FeatureMatrix::from_unit_rows(&rows)
}

const SPHERE_DIMS: [usize; 4] = [2, 8, 64, 512];

/// A pair with cosine above −0.999, in a dimension drawn from the test set.
fn unit_pair(rng: &mut ChaCha8Rng) -> (UnitVector, UnitVector) {
    let d = SPHERE_DIMS[rng.random_range(0..SPHERE_DIMS.len())];
    let phi = unit(rng, d);
    loop {
        let psi = unit(rng, d);
        if dot(phi.as_slice(), psi.as_slice()) > -0.999 {
            return (phi, psi);
        }
    }
}

fn contraction(rng: &mut ChaCha8Rng, o: &VerifyOptions) -> Result<bool> {
    let (phi, psi) = unit_pair(rng);
    let omega = (o.fuse)(&FusionInput::new(&phi, &psi)?)?;
    let gap = 0.5 * squared_distance(psi.as_slice(), phi.as_slice())
        - squared_distance(omega.as_slice(), phi.as_slice());
    Ok(gap >= -1e-12)
}

fn alignment_closed_form(rng: &mut ChaCha8Rng, o: &VerifyOptions) -> Result<bool> {
    let (phi, psi) = unit_pair(rng);
    let omega = (o.fuse)(&FusionInput::new(&phi, &psi)?)?;
    let gamma = dot(phi.as_slice(), psi.as_slice());
    let expected = ((1.0 + gamma) / 2.0).sqrt();
    Ok((dot(omega.as_slice(), phi.as_slice()) - expected).abs() <= 1e-10)
}

fn fused_unit_norm(rng: &mut ChaCha8Rng, o: &VerifyOptions) -> Result<bool> {
    let (phi, psi) = unit_pair(rng);
    let omega = (o.fuse)(&FusionInput::new(&phi, &psi)?)?;
    Ok((dot(omega.as_slice(), omega.as_slice()).sqrt() - 1.0).abs() <= 1e-12)
}

fn sphere_identity(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<bool> {
    let (u, v) = unit_pair(rng);
    let lhs = squared_distance(u.as_slice(), v.as_slice());
    let rhs = 2.0 * (1.0 - dot(u.as_slice(), v.as_slice()));
    Ok((lhs - rhs).abs() <= 1e-12)
}

fn fusion_lipschitz(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<bool> {
    let (phi, a) = unit_pair(rng);
    let b = loop {
        let b = unit(rng, phi.dim());
        if dot(phi.as_slice(), b.as_slice()) > -0.999 {
            break b;
        }
    };
    let norm_of_sum = |p: &UnitVector| {
        let s: Vec<f64> = phi.as_slice().iter().zip(p.as_slice()).map(|(x, y)| x + y).collect();
        dot(&s, &s).sqrt()
    };
    let upsilon = norm_of_sum(&a).min(norm_of_sum(&b));
    Ok(fusion_lipschitz_check(&phi, &a, &b, upsilon)?.holds(1e-12))
}

/// A cloud with a decaying spectrum so every rank is well separated.
fn structured_cloud(rng: &mut ChaCha8Rng) -> Result<FeatureMatrix> {
    let n = rng.random_range(8..48);
    let d = rng.random_range(3..20);
    let scales: Vec<f64> = (0..d).map(|j| 0.7f64.powi(j as i32)).collect();
    let rows: Vec<UnitVector> = (0..n)
        .map(|_| loop {
            let mut v = gaussian(rng, d);
            v.iter_mut().zip(&scales).for_each(|(x, s)| *x *= s);
            v[0] += 1.0;
            if let Ok(u) = normalize(&v) {
                break u;
            }
        })
        .collect();
    FeatureMatrix::from_unit_rows(&rows)
}

fn self_drift_zero(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<bool> {
    let z = structured_cloud(rng)?;
    let k = rng.random_range(1..=max_rank(z.n_rows(), z.dim()));
    Ok(manifold_drift(&z, &z, k)?.delta.abs() <= 1e-10)
}

fn ratio_in_unit_interval(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<bool> {
    let z = structured_cloud(rng)?;
    let h = unit_matrix(rng, z.n_rows(), z.dim())?;
    let k = rng.random_range(1..=max_rank(z.n_rows(), z.dim()));
    let r = manifold_drift(&z, &h, k)?;
    let inside = |x: f64| (0.0..=1.0).contains(&x);
    Ok(inside(r.ratio_pretrained) && inside(r.ratio_tuned))
}

fn tail_energy(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<bool> {
    let z = structured_cloud(rng)?;
    let k = rng.random_range(1..=max_rank(z.n_rows(), z.dim()));
    let sub = fit_subspace(&z, k)?;
    Ok((off_manifold_ratio(&z, &sub)? - sub.tail_energy_fraction()).abs() <= 1e-8)
}

fn shift_decomposition(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<bool> {
    let z = structured_cloud(rng)?;
    let k = rng.random_range(1..=max_rank(z.n_rows(), z.dim()));
    let sub = fit_subspace(&z, k)?;
    let delta = gaussian(rng, z.dim());
    let s = decompose_shift(&delta, sub.basis())?;
    let recomposed = s
        .in_subspace
        .iter()
        .zip(&s.complement)
        .zip(&delta)
        .all(|((a, b), d)| (a + b - d).abs() <= 1e-10);
    Ok(recomposed && dot(&s.in_subspace, &s.complement).abs() <= 1e-10)
}

fn random_bank(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Result<PrototypeBank> {
    build_prototypes(
        (0..classes)
            .map(|_| (0..rng.random_range(1..4)).map(|_| unit(rng, dim)).collect())
            .collect(),
    )
}

const TAUS: [f64; 3] = [0.5, 1.0, 2.0];

fn logit_perturbation(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<bool> {
    let n = rng.random_range(1..=32);
    let c = rng.random_range(1..=8);
    let d = rng.random_range(2..=32);
    let tau = TAUS[rng.random_range(0..TAUS.len())];
    let frozen = unit_matrix(rng, n, d)?;
    let fused = unit_matrix(rng, n, d)?;
    let fused_txt = unit_matrix(rng, c, d)?;
    let bank = random_bank(rng, c, d)?;
    let check = check_logit_perturbation(&fused, &frozen, &fused_txt, &bank, tau)?;
    Ok(check.empirical <= check.bound + 1e-9)
}

fn random_logits(rng: &mut ChaCha8Rng) -> Result<(LogitVector, usize, f64)> {
    let c = rng.random_range(2..=16);
    let d = rng.random_range(2..=32);
    let tau = rng.random_range(0.1..10.0);
    let f = unit(rng, d);
    let txt = unit_matrix(rng, c, d)?;
    Ok((logits(f.as_slice(), &txt, tau)?, rng.random_range(0..c), tau))
}

fn cross_entropy_range(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<bool> {
    let (l, y, tau) = random_logits(rng)?;
    let phi = cross_entropy(&l, y)?;
    Ok(phi >= -1e-9 && phi <= loss_bound_b(l.num_classes(), tau)? + 1e-9)
}

fn cross_entropy_lipschitz(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<bool> {
    let (l, y, tau) = random_logits(rng)?;
    let scale = rng.random_range(1e-3..2.0);
    let moved: Vec<f64> = l.values().iter().map(|v| v + scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let l2 = LogitVector::new(moved, tau)?;
    let lhs = (cross_entropy(&l, y)? - cross_entropy(&l2, y)?).abs();
    let dist = squared_distance(l.values(), l2.values()).sqrt();
    Ok(lhs <= 2f64.sqrt() * dist + 1e-9)
}

const LAMBDAS: [f64; 3] = [0.0, 1.0, 12.0];

/// A small random training instance: `N = 4`, `C = 3`, `d = 8`.
pub struct GradInstance {
    pub frozen_vis: FeatureMatrix,
    pub frozen_txt: FeatureMatrix,
    pub labels: Vec<usize>,
    pub bank: PrototypeBank,
    pub objective: Objective,
    pub params: PromptParams,
}

impl GradInstance {
    pub fn random<R: Rng>(rng: &mut R, lambda: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng.random());
        let (n, c, d) = (4, 3, 8);
        let tau = rng.random_range(0.5..5.0);
        Ok(Self {
            frozen_vis: unit_matrix(&mut rng, n, d)?,
            frozen_txt: unit_matrix(&mut rng, c, d)?,
            labels: (0..n).map(|_| rng.random_range(0..c)).collect(),
            bank: random_bank(&mut rng, c, d)?,
            objective: Objective::new(lambda, tau)?,
            params: PromptParams::random(d, 0.3, &mut rng)?,
        })
    }

    fn batch(&self) -> TrainBatch<'_> {
        TrainBatch {
            frozen_vis: &self.frozen_vis,
            frozen_txt: &self.frozen_txt,
            labels: &self.labels,
        }
    }

    /// `‖g_analytic − g_fd‖ / max(‖g_analytic‖, ‖g_fd‖)` with central differences.
    pub fn relative_error(&self, step: f64) -> Result<f64> {
        let batch = self.batch();
        let (_, analytic) = grad_total(&batch, &self.bank, &self.objective, &self.params)?;
        let base = self.params.to_flat();
        let d = self.params.dim();
        let mut numeric = vec![0.0; base.len()];
        let mut probe = base.clone();
        for k in 0..base.len() {
            probe[k] = base[k] + step;
            let up = objective_value(&batch, &self.bank, &self.objective, &PromptParams::from_flat(d, &probe)?)?;
            probe[k] = base[k] - step;
            let down = objective_value(&batch, &self.bank, &self.objective, &PromptParams::from_flat(d, &probe)?)?;
            probe[k] = base[k];
            numeric[k] = (up.total - down.total) / (2.0 * step);
        }
        let a = analytic.to_flat();
        let diff = squared_distance(&a, &numeric).sqrt();
        let scale = dot(&a, &a).sqrt().max(dot(&numeric, &numeric).sqrt());
        Ok(if scale == 0.0 { diff } else { diff / scale })
    }
}

fn finite_difference(rng: &mut ChaCha8Rng, _: &VerifyOptions) -> Result<bool> {
    let lambda = LAMBDAS[rng.random_range(0..LAMBDAS.len())];
    let inst = GradInstance::random(rng, lambda)?;
    Ok(inst.relative_error(FD_STEP)? < FD_TOLERANCE)
}
