//! Closed-form evaluators for the consistency-controlled generalization bounds.
//!
//! Notation follows the library: `τ` temperature, `C` classes, `N` samples,
//! `D` prompt dimension, `R` parameter radius, `Λ` Lipschitz constant of the
//! loss-difference class, `ρ` failure probability and `ε` the consistency
//! level defining the localized class.

use std::f64::consts::E;

use crate::error::{Error, Result};
use crate::losses::{consistency_img, consistency_txt, PrototypeBank};
use crate::matrix::FeatureMatrix;
use crate::sphere::{dot, squared_distance, UnitVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    pub tau: f64,
    pub num_classes: usize,
    pub num_samples: usize,
    pub prompt_dim: usize,
    pub param_radius: f64,
    pub lipschitz: f64,
    pub confidence: f64,
    pub epsilon: f64,
}

impl Default for BoundParams {
    fn default() -> Self {
        Self {
            tau: 1.0,
            num_classes: 2,
            num_samples: 128,
            prompt_dim: 1,
            param_radius: 1.0,
            lipschitz: 1.0,
            confidence: 0.05,
            epsilon: 0.1,
        }
    }
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidParameter(what));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if self.num_classes == 0 || self.num_samples == 0 || self.prompt_dim == 0 {
            return bad("num_classes, num_samples and prompt_dim must be at least 1".into());
        }
        if !(self.param_radius > 0.0 && self.param_radius.is_finite()) {
            return bad(format!("param_radius {} must be positive", self.param_radius));
        }
        if !(self.lipschitz > 0.0 && self.lipschitz.is_finite()) {
            return bad(format!("lipschitz {} must be positive", self.lipschitz));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad(format!("confidence {} outside (0, 1)", self.confidence));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be non-negative", self.epsilon));
        }
        Ok(())
    }

    pub fn loss_bound(&self) -> f64 {
        self.num_classes_f().ln() + 2.0 * self.tau
    }

    fn num_classes_f(&self) -> f64 {
        self.num_classes as f64
    }
}

/// `B = log C + 2τ`, the range of cross-entropy on unit-feature logits.
pub fn loss_bound_b(num_classes: usize, tau: f64) -> Result<f64> {
    if num_classes == 0 || !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need C >= 1 and tau > 0, got C={num_classes}, tau={tau}"
        )));
    }
    Ok((num_classes as f64).ln() + 2.0 * tau)
}

/// `4τ²C·L_con`: ceiling on the mean squared logit perturbation.
pub fn logit_perturbation_bound(tau: f64, num_classes: usize, l_con: f64) -> Result<f64> {
    if !(tau > 0.0) || !(l_con >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "need tau > 0 and l_con >= 0, got tau={tau}, l_con={l_con}"
        )));
    }
    Ok(4.0 * tau * tau * num_classes as f64 * l_con)
}

/// Mean `‖ℓ^θ − ℓ⁰‖²` where `ℓ^θ_c = τ⟨f_vis, f_txt_c⟩` and `ℓ⁰_c = τ⟨z_vis, w_c⟩`.
pub fn empirical_logit_perturbation(
    fused_vis: &FeatureMatrix,
    frozen_vis: &FeatureMatrix,
    fused_txt: &FeatureMatrix,
    prototypes: &PrototypeBank,
    tau: f64,
) -> Result<f64> {
    fused_vis.ensure_same_shape(frozen_vis, "fused vs frozen visual features")?;
    if fused_txt.n_rows() != prototypes.num_classes() || fused_txt.dim() != fused_vis.dim() {
        return Err(Error::ShapeMismatch(format!(
            "fused text {}x{} vs {} prototypes, visual dim {}",
            fused_txt.n_rows(),
            fused_txt.dim(),
            prototypes.num_classes(),
            fused_vis.dim()
        )));
    }
    if fused_vis.n_rows() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let mut total = 0.0;
    for (f, z) in fused_vis.rows().zip(frozen_vis.rows()) {
        total += fused_txt
            .rows()
            .zip(prototypes.prototypes())
            .map(|(g, w)| {
                let d = tau * (dot(f, g) - dot(z, w.as_slice()));
                d * d
            })
            .sum::<f64>();
    }
    Ok(total / fused_vis.n_rows() as f64)
}

/// Both sides of the logit-perturbation inequality on one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitPerturbationCheck {
    pub empirical: f64,
    pub l_con: f64,
    pub bound: f64,
}

pub fn check_logit_perturbation(
    fused_vis: &FeatureMatrix,
    frozen_vis: &FeatureMatrix,
    fused_txt: &FeatureMatrix,
    prototypes: &PrototypeBank,
    tau: f64,
) -> Result<LogitPerturbationCheck> {
    let empirical = empirical_logit_perturbation(fused_vis, frozen_vis, fused_txt, prototypes, tau)?;
    let l_con = consistency_img(fused_vis, frozen_vis)? + consistency_txt(fused_txt, prototypes)?;
    let bound = logit_perturbation_bound(tau, prototypes.num_classes(), l_con)?;
    Ok(LogitPerturbationCheck {
        empirical,
        l_con,
        bound,
    })
}

/// `(24τ/√N) · √s · √(D · log(3eΛR / (2τ√s)))` with `s` the squared radius
/// factor (`2Cε` for the fixed level, `4C·L_con` under peeling).
fn dudley_term(params: &BoundParams, radius_sq: f64) -> Result<f64> {
    if radius_sq == 0.0 {
        return Ok(0.0);
    }
    let tau = params.tau;
    let argument = 3.0 * E * params.lipschitz * params.param_radius / (2.0 * tau * radius_sq.sqrt());
    if !(argument > 1.0) {
        return Err(Error::DegenerateRegime { argument });
    }
    Ok(24.0 * tau / (params.num_samples as f64).sqrt()
        * radius_sq.sqrt()
        * (params.prompt_dim as f64 * argument.ln()).sqrt())
}

/// Dudley-integral upper bound on the empirical Rademacher complexity of the
/// `ε`-localized loss-difference class. Exactly 0 at `ε = 0`.
pub fn rademacher_bound(params: &BoundParams) -> Result<f64> {
    params.validate()?;
    dudley_term(params, 2.0 * params.num_classes as f64 * params.epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralizationBound {
    pub loss_bound: f64,
    pub rademacher: f64,
    pub deviation: f64,
    pub bound: f64,
}

fn deviation_term(loss_bound: f64, log_numerator: f64, params: &BoundParams) -> f64 {
    4.0 * loss_bound * ((log_numerator / params.confidence).ln() / (2.0 * params.num_samples as f64)).sqrt()
}

/// `R̂ + 2ℜ + 4B√(log(4/ρ) / 2N)`.
pub fn generalization_bound(empirical_risk: f64, params: &BoundParams) -> Result<GeneralizationBound> {
    if !(empirical_risk >= 0.0 && empirical_risk.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "empirical risk {empirical_risk} must be non-negative"
        )));
    }
    let rademacher = rademacher_bound(params)?;
    let loss_bound = params.loss_bound();
    let deviation = deviation_term(loss_bound, 4.0, params);
    Ok(GeneralizationBound {
        loss_bound,
        rademacher,
        deviation,
        bound: empirical_risk + 2.0 * rademacher + deviation,
    })
}

/// Peeling depth `⌈log₂ N⌉`.
pub fn peeling_depth(num_samples: usize) -> usize {
    if num_samples <= 1 {
        0
    } else {
        (usize::BITS - (num_samples - 1).leading_zeros()) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeelingBound {
    pub depth: usize,
    pub loss_bound: f64,
    pub complexity: f64,
    pub deviation: f64,
    pub bound: f64,
}

/// Adaptive bound holding uniformly over `L_con ∈ (0, 1]`: the complexity term
/// uses `4C·L_con` in place of `2Cε` and the deviation term pays
/// `log(4(H+1)/ρ)` for the union over `H + 1` dyadic layers.
pub fn peeling_bound(empirical_risk: f64, l_con: f64, params: &BoundParams) -> Result<PeelingBound> {
    params.validate()?;
    if !(l_con > 0.0 && l_con <= 1.0) {
        return Err(Error::LConOutOfRange(l_con));
    }
    if !(empirical_risk >= 0.0 && empirical_risk.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "empirical risk {empirical_risk} must be non-negative"
        )));
    }
    let depth = peeling_depth(params.num_samples);
    let complexity = dudley_term(params, 4.0 * params.num_classes as f64 * l_con)?;
    let loss_bound = params.loss_bound();
    let deviation = deviation_term(loss_bound, 4.0 * (depth as f64 + 1.0), params);
    Ok(PeelingBound {
        depth,
        loss_bound,
        complexity,
        deviation,
        bound: empirical_risk + complexity + deviation,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorStats {
    pub per_class_distance: Vec<f64>,
    /// Index into each class's candidate list of the nearest candidate.
    pub nearest: Vec<usize>,
    pub zeta_max: f64,
    pub eps_proj: f64,
}

/// Distance from each anchor to its nearest realizable candidate.
pub fn anchor_stats(anchors: &[UnitVector], candidates: &[Vec<UnitVector>]) -> Result<AnchorStats> {
    if anchors.len() != candidates.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} anchors vs {} candidate sets",
            anchors.len(),
            candidates.len()
        )));
    }
    if anchors.is_empty() {
        return Err(Error::EmptyClass { class: 0 });
    }
    let mut per_class_distance = Vec::with_capacity(anchors.len());
    let mut nearest = Vec::with_capacity(anchors.len());
    for (c, (w, set)) in anchors.iter().zip(candidates).enumerate() {
        if set.is_empty() {
            return Err(Error::EmptyClass { class: c });
        }
        let mut best = (0, f64::INFINITY);
        for (j, z) in set.iter().enumerate() {
            if z.dim() != w.dim() {
                return Err(Error::DimensionMismatch {
                    expected: w.dim(),
                    found: z.dim(),
                });
            }
            let dist = squared_distance(w.as_slice(), z.as_slice());
            if dist < best.1 {
                best = (j, dist);
            }
        }
        nearest.push(best.0);
        per_class_distance.push(best.1.sqrt());
    }
    let zeta_max = per_class_distance.iter().copied().fold(0.0, f64::max);
    let eps_proj =
        per_class_distance.iter().map(|d| d * d).sum::<f64>() / per_class_distance.len() as f64;
    Ok(AnchorStats {
        per_class_distance,
        nearest,
        zeta_max,
        eps_proj,
    })
}

/// `min_i (1 + ⟨zᵢ, hᵢ⟩)`; positive means every pair can be fused.
pub fn non_opposition_margins(frozen: &FeatureMatrix, prompt: &FeatureMatrix) -> Result<f64> {
    frozen.ensure_same_shape(prompt, "frozen vs prompt features")?;
    if frozen.n_rows() == 0 {
        return Err(Error::EmptyMatrix);
    }
    Ok(frozen
        .rows()
        .zip(prompt.rows())
        .map(|(z, h)| (1.0 + dot(z, h)).clamp(0.0, 2.0))
        .fold(f64::INFINITY, f64::min))
}
