//! Unit-sphere primitives.
//!
//! Everything here works on `f64` slices or on [`UnitVector`], a thin newtype
//! that guarantees `|‖v‖₂ − 1| ≤ 1e-9` and finite entries. The fusion map
//! `(φ + ψ) / ‖φ + ψ‖` is the structural-bias operator: it always lands at
//! least as close to the frozen feature `φ` (in squared distance, halved) as
//! the prompt feature `ψ` was.

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero by [`normalize`].
pub const DEFAULT_ZERO_THRESHOLD: f64 = 1e-12;

/// Default non-near-opposition margin κ; fusion requires `‖φ+ψ‖² ≥ 2κ`.
pub const DEFAULT_OPPOSITION_MARGIN: f64 = 1e-6;

const UNIT_TOLERANCE: f64 = 1e-9;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A finite vector of Euclidean length one.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Wraps a vector that is already unit norm, checking the invariant.
    pub fn from_unit(components: Vec<f64>) -> Result<Self> {
        if components.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite component".into()));
        }
        let n = norm(&components);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NotNormalized { row: 0, norm: n });
        }
        Ok(Self(components))
    }

    /// The standard basis vector `e_index` in dimension `dim`.
    pub fn basis(dim: usize, index: usize) -> Self {
        assert!(index < dim, "basis index {index} out of range for dim {dim}");
        let mut v = vec![0.0; dim];
        v[index] = 1.0;
        Self(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|x| -x).collect())
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Scales `v` to unit length.
pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    normalize_with_threshold(v, DEFAULT_ZERO_THRESHOLD)
}

pub fn normalize_with_threshold(v: &[f64], threshold: f64) -> Result<UnitVector> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("non-finite component".into()));
    }
    let n = norm(v);
    if n <= threshold {
        return Err(Error::ZeroNorm { norm: n, threshold });
    }
    Ok(UnitVector(v.iter().map(|x| x / n).collect()))
}

fn check_dims(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    Ok(())
}

/// Cosine of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(u: &UnitVector, v: &UnitVector) -> Result<f64> {
    check_dims(u.as_slice(), v.as_slice())?;
    Ok(dot(u.as_slice(), v.as_slice()).clamp(-1.0, 1.0))
}

/// Squared chordal distance via the sphere identity `‖u−v‖² = 2(1 − ⟨u,v⟩)`.
pub fn sphere_distance_sq(u: &UnitVector, v: &UnitVector) -> Result<f64> {
    Ok(2.0 * (1.0 - cosine(u, v)?))
}

/// Explicit `‖a − b‖²`, used as the reference side of the sphere identity.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A frozen feature paired with a prompt-branch feature of the same dimension.
#[derive(Debug, Clone, Copy)]
pub struct FusionInput<'a> {
    frozen: &'a UnitVector,
    prompt: &'a UnitVector,
    margin: f64,
}

impl<'a> FusionInput<'a> {
    pub fn new(frozen: &'a UnitVector, prompt: &'a UnitVector) -> Result<Self> {
        check_dims(frozen.as_slice(), prompt.as_slice())?;
        Ok(Self {
            frozen,
            prompt,
            margin: DEFAULT_OPPOSITION_MARGIN,
        })
    }

    pub fn with_margin(mut self, margin: f64) -> Result<Self> {
        if !(margin > 0.0 && margin <= 2.0) {
            return Err(Error::InvalidParameter(format!(
                "opposition margin {margin} outside (0, 2]"
            )));
        }
        self.margin = margin;
        Ok(self)
    }

    pub fn frozen(&self) -> &UnitVector {
        self.frozen
    }

    pub fn prompt(&self) -> &UnitVector {
        self.prompt
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }
}

/// Sums `frozen + prompt` into `out` and returns its norm, or
/// `NearOpposition` if the squared norm falls below `2 * margin`.
pub(crate) fn fused_sum(frozen: &[f64], prompt: &[f64], margin: f64, out: &mut [f64]) -> Result<f64> {
    for ((o, a), b) in out.iter_mut().zip(frozen).zip(prompt) {
        *o = a + b;
    }
    let norm_sq = dot(out, out);
    let threshold = 2.0 * margin;
    if !(norm_sq >= threshold) {
        return Err(Error::NearOpposition { norm_sq, threshold });
    }
    Ok(norm_sq.sqrt())
}

/// Residual fusion `(frozen + prompt) / ‖frozen + prompt‖`.
pub fn fuse(input: &FusionInput<'_>) -> Result<UnitVector> {
    let mut sum = vec![0.0; input.frozen.dim()];
    let n = fused_sum(
        input.frozen.as_slice(),
        input.prompt.as_slice(),
        input.margin,
        &mut sum,
    )?;
    sum.iter_mut().for_each(|x| *x /= n);
    Ok(UnitVector(sum))
}

/// `½‖prompt − frozen‖² − ‖fuse − frozen‖²`; never negative beyond round-off.
pub fn contraction_gap(input: &FusionInput<'_>) -> Result<f64> {
    let fused = fuse(input)?;
    let before = squared_distance(input.prompt.as_slice(), input.frozen.as_slice());
    let after = squared_distance(fused.as_slice(), input.frozen.as_slice());
    Ok(0.5 * before - after)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzCheck {
    pub lhs: f64,
    pub bound: f64,
}

impl LipschitzCheck {
    pub fn holds(&self, tol: f64) -> bool {
        self.lhs <= self.bound + tol
    }
}

/// Evaluates both sides of the `2/υ` Lipschitz estimate for the fusion map
/// with `frozen` held fixed.
pub fn fusion_lipschitz_check(
    frozen: &UnitVector,
    prompt_a: &UnitVector,
    prompt_b: &UnitVector,
    upsilon: f64,
) -> Result<LipschitzCheck> {
    if !(upsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("upsilon {upsilon} must be positive")));
    }
    check_dims(frozen.as_slice(), prompt_a.as_slice())?;
    check_dims(frozen.as_slice(), prompt_b.as_slice())?;
    let d = frozen.dim();
    let mut sa = vec![0.0; d];
    let mut sb = vec![0.0; d];
    let na = fused_sum(frozen.as_slice(), prompt_a.as_slice(), f64::MIN_POSITIVE, &mut sa)
        .map_err(|_| Error::MarginViolation { norm: 0.0, upsilon })?;
    let nb = fused_sum(frozen.as_slice(), prompt_b.as_slice(), f64::MIN_POSITIVE, &mut sb)
        .map_err(|_| Error::MarginViolation { norm: 0.0, upsilon })?;
    for n in [na, nb] {
        if n < upsilon {
            return Err(Error::MarginViolation { norm: n, upsilon });
        }
    }
    let lhs = sa
        .iter()
        .zip(&sb)
        .map(|(a, b)| {
            let t = a / na - b / nb;
            t * t
        })
        .sum::<f64>()
        .sqrt();
    let bound = 2.0 / upsilon * squared_distance(prompt_a.as_slice(), prompt_b.as_slice()).sqrt();
    Ok(LipschitzCheck { lhs, bound })
}
