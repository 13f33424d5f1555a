//! Learnable prompt branch.
//!
//! Deep prompting of a transformer encoder is replaced by a normalized affine
//! perturbation of the frozen feature, `h = normalize(z + M z + b)`, one map per
//! modality. With `M = 0, b = 0` the branch reproduces the frozen feature.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::sphere::{normalize, UnitVector};

/// Square perturbation maps (row-major) and biases for both towers.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    dim: usize,
    pub vis_map: Vec<f64>,
    pub vis_bias: Vec<f64>,
    pub txt_map: Vec<f64>,
    pub txt_bias: Vec<f64>,
}

impl PromptParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            vis_map: vec![0.0; dim * dim],
            vis_bias: vec![0.0; dim],
            txt_map: vec![0.0; dim * dim],
            txt_bias: vec![0.0; dim],
        }
    }

    /// Every entry drawn from `N(0, std²)`.
    pub fn random<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidParameter(format!("init std {std}: {e}")))?;
        let mut p = Self::zeros(dim);
        for x in p.entries_mut() {
            *x = normal.sample(rng);
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_params(&self) -> usize {
        2 * (self.dim * self.dim + self.dim)
    }

    /// All entries in a fixed order: vis_map, vis_bias, txt_map, txt_bias.
    pub fn entries(&self) -> impl Iterator<Item = &f64> {
        self.vis_map
            .iter()
            .chain(&self.vis_bias)
            .chain(&self.txt_map)
            .chain(&self.txt_bias)
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.vis_map
            .iter_mut()
            .chain(self.vis_bias.iter_mut())
            .chain(self.txt_map.iter_mut())
            .chain(self.txt_bias.iter_mut())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.entries().copied().collect()
    }

    pub fn from_flat(dim: usize, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(dim);
        if flat.len() != p.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                p.num_params()
            )));
        }
        p.entries_mut().zip(flat).for_each(|(d, s)| *d = *s);
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.entries().all(|x| x.is_finite())
    }

    /// `self -= step * grad`
    pub fn descend(&mut self, grad: &Self, step: f64) {
        self.entries_mut()
            .zip(grad.entries())
            .for_each(|(p, g)| *p -= step * g);
    }

    pub fn norm(&self) -> f64 {
        self.entries().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `frozen + map·frozen + bias`, written into `out`.
pub(crate) fn perturb(frozen: &[f64], map: &[f64], bias: &[f64], out: &mut [f64]) {
    let d = frozen.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &map[r * d..(r + 1) * d];
        *o = frozen[r] + bias[r] + crate::sphere::dot(row, frozen);
    }
}

/// `normalize(frozen + map·frozen + bias)`.
pub fn prompt_branch(frozen: &UnitVector, map: &[f64], bias: &[f64]) -> Result<UnitVector> {
    let d = frozen.dim();
    if map.len() != d * d || bias.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "map has {} entries and bias {} for dim {d}",
            map.len(),
            bias.len()
        )));
    }
    let mut u = vec![0.0; d];
    perturb(frozen.as_slice(), map, bias, &mut u);
    normalize(&u)
}
