//! PCA-based manifold drift.
//!
//! A principal subspace is fitted to the pretrained cloud `Z` (row mean `μ`,
//! top right singular vectors of `Z − 𝟙μᵀ`). The off-manifold ratio of a cloud
//! `X` is the share of its `μ`-centered energy outside that subspace:
//!
//! ```text
//! R(X) = Σᵢ ‖(I − VVᵀ)(xᵢ − μ)‖² / (Σᵢ ‖xᵢ − μ‖² + 1e-12)
//! ```
//!
//! and drift is `Δ = R(H) − R(Z)`. Projections use the factored form
//! `V(Vᵀx)`; the `d × d` projector is never built.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, ROW_UNIT_TOLERANCE};
use crate::sphere::dot;

/// Stabilizer added to the total energy in the ratio denominator.
pub const EPS_NUM: f64 = 1e-12;

/// Default number of principal directions.
pub const DEFAULT_PCA_RANK: usize = 64;

const DEGENERATE_ENERGY: f64 = 1e-20;

/// Centroid, orthonormal basis (`d × k`) and singular values of a fitted cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalSubspace {
    centroid: Vec<f64>,
    basis: DMatrix<f64>,
    singular_values: Vec<f64>,
    all_singular_values: Vec<f64>,
}

impl PrincipalSubspace {
    pub fn centroid(&self) -> &[f64] {
        &self.centroid
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.centroid.len()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// The leading `rank` singular values, non-increasing.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// Every singular value of the centered matrix (length `min(N, d)`).
    pub fn spectrum(&self) -> &[f64] {
        &self.all_singular_values
    }

    /// `Σ_{k > rank} σₖ² / Σ σₖ²`, the off-manifold share of the fitting cloud
    /// read directly from its spectrum.
    pub fn tail_energy_fraction(&self) -> f64 {
        let total: f64 = self.all_singular_values.iter().map(|s| s * s).sum();
        let tail: f64 = self.all_singular_values[self.rank()..].iter().map(|s| s * s).sum();
        tail / (total + EPS_NUM)
    }

    /// Coordinates `Vᵀ c` of a centered vector.
    fn coordinates(&self, centered: &[f64]) -> Vec<f64> {
        (0..self.rank())
            .map(|k| dot(self.basis.column(k).as_slice(), centered))
            .collect()
    }

    /// Splits `x − μ` into its in-subspace and residual parts.
    pub fn split(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        let centered: Vec<f64> = x.iter().zip(&self.centroid).map(|(a, m)| a - m).collect();
        let coords = self.coordinates(&centered);
        let mut inside = vec![0.0; self.dim()];
        for (k, c) in coords.iter().enumerate() {
            let col = self.basis.column(k);
            inside.iter_mut().zip(col.iter()).for_each(|(p, v)| *p += c * v);
        }
        let residual = centered.iter().zip(&inside).map(|(a, b)| a - b).collect();
        Ok((inside, residual))
    }
}

/// Largest admissible rank for a cloud of `n` rows in dimension `d`.
pub fn max_rank(n: usize, d: usize) -> usize {
    if n > 1 {
        (n - 1).min(d)
    } else {
        0
    }
}

fn column_mean(z: &FeatureMatrix) -> Vec<f64> {
    let mut mu = vec![0.0; z.dim()];
    for row in z.rows() {
        mu.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    let n = z.n_rows() as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    mu
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Eigenpairs sorted by eigenvalue descending, ties by original index.
fn sorted_eigen(gram: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// Modified Gram-Schmidt on column `k` against columns `..k`; returns the
/// norm before rescaling.
fn orthonormalize_column(basis: &mut DMatrix<f64>, k: usize) -> f64 {
    for j in 0..k {
        let proj = basis.column(j).dot(&basis.column(k));
        let cj = basis.column(j).clone_owned();
        let mut ck = basis.column_mut(k);
        ck.axpy(-proj, &cj, 1.0);
    }
    let n = basis.column(k).norm();
    if n > 0.0 {
        basis.column_mut(k).unscale_mut(n);
    }
    n
}

/// Fits the top-`rank` principal subspace of a normalized cloud.
///
/// The eigendecomposition runs on the smaller Gram matrix: `Z̄ᵀZ̄` (`d × d`)
/// when `N ≥ d`, otherwise `Z̄Z̄ᵀ` (`N × N`) with right singular vectors
/// recovered as `Z̄ᵀu / σ`.
pub fn fit_subspace(z: &FeatureMatrix, rank: usize) -> Result<PrincipalSubspace> {
    let n = z.n_rows();
    let d = z.dim();
    if n == 0 {
        return Err(Error::EmptyMatrix);
    }
    z.check_unit_rows(ROW_UNIT_TOLERANCE)?;
    let mu = column_mean(z);
    let centered = DMatrix::from_fn(n, d, |i, j| z.row(i)[j] - mu[j]);
    if centered.norm_squared() <= DEGENERATE_ENERGY {
        return Err(Error::DegenerateCloud);
    }
    let max = max_rank(n, d);
    if rank == 0 || rank > max {
        return Err(Error::RankTooLarge { rank, max });
    }

    let (eigenvalues, mut basis) = if n >= d {
        let (vals, vecs) = sorted_eigen(centered.transpose() * &centered);
        (vals, vecs.columns(0, rank).clone_owned())
    } else {
        let (vals, u) = sorted_eigen(&centered * centered.transpose());
        let mut v = DMatrix::zeros(d, rank);
        for k in 0..rank {
            let sigma = vals[k].max(0.0).sqrt();
            if sigma > 0.0 {
                let col = centered.transpose() * u.column(k) / sigma;
                v.set_column(k, &col);
            }
        }
        (vals, v)
    };

    // Restore exact orthonormality, and complete any column whose singular
    // value vanished with the lowest-index standard basis vector left over.
    let mut next_axis = 0;
    for k in 0..rank {
        if orthonormalize_column(&mut basis, k) < 0.5 {
            loop {
                basis.column_mut(k).fill(0.0);
                basis[(next_axis, k)] = 1.0;
                next_axis += 1;
                if orthonormalize_column(&mut basis, k) > 1e-6 {
                    break;
                }
            }
        }
        fix_sign(basis.column_mut(k).as_mut_slice());
    }

    let all_singular_values: Vec<f64> = eigenvalues
        .iter()
        .take(n.min(d))
        .map(|l| l.max(0.0).sqrt())
        .collect();
    Ok(PrincipalSubspace {
        centroid: mu,
        basis,
        singular_values: all_singular_values[..rank].to_vec(),
        all_singular_values,
    })
}

/// Off-manifold energy share of `x` against `subspace`, in `[0, 1]`.
pub fn off_manifold_ratio(x: &FeatureMatrix, subspace: &PrincipalSubspace) -> Result<f64> {
    if x.dim() != subspace.dim() {
        return Err(Error::DimensionMismatch {
            expected: subspace.dim(),
            found: x.dim(),
        });
    }
    let mut residual = 0.0;
    let mut total = 0.0;
    for row in x.rows() {
        let (_, r) = subspace.split(row)?;
        residual += dot(&r, &r);
        total += row
            .iter()
            .zip(subspace.centroid())
            .map(|(a, m)| (a - m) * (a - m))
            .sum::<f64>();
    }
    Ok((residual / (total + EPS_NUM)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftReport {
    pub ratio_pretrained: f64,
    pub ratio_tuned: f64,
    pub delta: f64,
    pub rank: usize,
    pub n_samples: usize,
}

fn drift_against(z: &FeatureMatrix, h: &FeatureMatrix, subspace: &PrincipalSubspace) -> Result<DriftReport> {
    let ratio_pretrained = off_manifold_ratio(z, subspace)?;
    let ratio_tuned = off_manifold_ratio(h, subspace)?;
    Ok(DriftReport {
        ratio_pretrained,
        ratio_tuned,
        delta: ratio_tuned - ratio_pretrained,
        rank: subspace.rank(),
        n_samples: z.n_rows(),
    })
}

/// `Δ = R(H) − R(Z)` with the subspace and centroid fitted on `Z`.
pub fn manifold_drift(z: &FeatureMatrix, h: &FeatureMatrix, rank: usize) -> Result<DriftReport> {
    z.ensure_same_shape(h, "pretrained vs tuned features")?;
    let subspace = fit_subspace(z, rank)?;
    drift_against(z, h, &subspace)
}

/// One drift report per rank, each from an independent fit.
pub fn drift_sensitivity(z: &FeatureMatrix, h: &FeatureMatrix, ranks: &[usize]) -> Result<Vec<DriftReport>> {
    z.ensure_same_shape(h, "pretrained vs tuned features")?;
    let max = max_rank(z.n_rows(), z.dim());
    if let Some(&bad) = ranks.iter().find(|&&r| r == 0 || r > max) {
        return Err(Error::RankTooLarge { rank: bad, max });
    }
    ranks.iter().map(|&r| manifold_drift(z, h, r)).collect()
}

/// In-subspace and complementary parts of a shift vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftDecomposition {
    pub in_subspace: Vec<f64>,
    pub complement: Vec<f64>,
}

/// Splits `delta` into `BBᵀδ` and `δ − BBᵀδ` for a column-orthonormal `B`.
pub fn decompose_shift(delta: &[f64], basis: &DMatrix<f64>) -> Result<ShiftDecomposition> {
    if basis.nrows() != delta.len() {
        return Err(Error::DimensionMismatch {
            expected: basis.nrows(),
            found: delta.len(),
        });
    }
    let gram = basis.transpose() * basis;
    let deviation = (gram - DMatrix::identity(basis.ncols(), basis.ncols())).abs().max();
    if deviation > 1e-8 {
        return Err(Error::NonOrthonormalBasis { deviation });
    }
    let mut in_subspace = vec![0.0; delta.len()];
    for col in basis.column_iter() {
        let c = dot(col.as_slice(), delta);
        in_subspace.iter_mut().zip(col.iter()).for_each(|(p, v)| *p += c * v);
    }
    let complement = delta.iter().zip(&in_subspace).map(|(a, b)| a - b).collect();
    Ok(ShiftDecomposition {
        in_subspace,
        complement,
    })
}

/// Row indices keeping at most `cap` rows per label, in original order.
pub fn cap_per_class(labels: &[usize], cap: usize) -> Vec<usize> {
    let mut seen: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| {
            let count = seen.entry(l).or_insert(0);
            *count += 1;
            (*count <= cap).then_some(i)
        })
        .collect()
}
