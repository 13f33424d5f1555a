//! Classification and cosine-consistency objectives on fused features.
//!
//! Logits are `τ·⟨f_vis, f_txt_c⟩` over fused unit features, cross-entropy is the
//! max-shifted log-sum-exp form, and the consistency terms are mean `1 − cos`
//! against the frozen visual features (image side) and the class prototypes
//! (text side). [`grad_total`] differentiates the whole pipeline, from prompt
//! parameters through the prompt-branch normalization and the fusion
//! renormalization, with frozen features held constant.

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, ROW_UNIT_TOLERANCE};
use crate::prompt::{perturb, PromptParams};
use crate::sphere::{dot, fused_sum, normalize, UnitVector, DEFAULT_OPPOSITION_MARGIN};

/// `τ`-scaled cosine logits for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    values: Vec<f64>,
    tau: f64,
}

impl LogitVector {
    pub fn new(values: Vec<f64>, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self { values, tau })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn num_classes(&self) -> usize {
        self.values.len()
    }

    /// First index of the maximum logit.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub img: f64,
    pub txt: f64,
    pub con: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn compose(ce: f64, img: f64, txt: f64, lambda: f64) -> Self {
        let con = img + txt;
        Self {
            ce,
            img,
            txt,
            con,
            total: ce + lambda * con,
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.img, self.txt, self.con, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Per-class description features and their normalized-sum prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    descriptions: Vec<Vec<UnitVector>>,
    prototypes: Vec<UnitVector>,
    provenance: Vec<Vec<String>>,
}

impl PrototypeBank {
    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].dim()
    }

    pub fn prototype(&self, class: usize) -> &UnitVector {
        &self.prototypes[class]
    }

    pub fn prototypes(&self) -> &[UnitVector] {
        &self.prototypes
    }

    pub fn descriptions(&self, class: usize) -> &[UnitVector] {
        &self.descriptions[class]
    }

    /// Opaque per-description source strings, if attached.
    pub fn provenance(&self, class: usize) -> &[String] {
        self.provenance.get(class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn with_provenance(mut self, provenance: Vec<Vec<String>>) -> Result<Self> {
        if provenance.len() != self.num_classes()
            || provenance
                .iter()
                .zip(&self.descriptions)
                .any(|(p, d)| p.len() != d.len())
        {
            return Err(Error::ShapeMismatch(
                "provenance does not match description counts".into(),
            ));
        }
        self.provenance = provenance;
        Ok(self)
    }

    /// Prototypes stacked as a `C × d` normalized matrix.
    pub fn to_matrix(&self) -> FeatureMatrix {
        FeatureMatrix::from_unit_rows(&self.prototypes).expect("prototypes are unit rows")
    }
}

/// Aggregates each class's description features into `normalize(Σ η)`.
pub fn build_prototypes(description_features: Vec<Vec<UnitVector>>) -> Result<PrototypeBank> {
    if description_features.is_empty() {
        return Err(Error::EmptyClass { class: 0 });
    }
    let dim = description_features
        .iter()
        .find_map(|c| c.first())
        .map(UnitVector::dim)
        .ok_or(Error::EmptyClass { class: 0 })?;
    let mut prototypes = Vec::with_capacity(description_features.len());
    for (c, feats) in description_features.iter().enumerate() {
        if feats.is_empty() {
            return Err(Error::EmptyClass { class: c });
        }
        let mut sum = vec![0.0; dim];
        for f in feats {
            if f.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: f.dim(),
                });
            }
            sum.iter_mut().zip(f.as_slice()).for_each(|(s, x)| *s += x);
        }
        prototypes.push(normalize(&sum)?);
    }
    Ok(PrototypeBank {
        descriptions: description_features,
        prototypes,
        provenance: Vec::new(),
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!("temperature {tau} must be positive")));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda {lambda} must be non-negative")));
    }
    Ok(())
}

/// Mean `1 − ⟨f_i, z_i⟩` over paired unit rows.
pub fn consistency_img(fused_vis: &FeatureMatrix, frozen_vis: &FeatureMatrix) -> Result<f64> {
    fused_vis.ensure_same_shape(frozen_vis, "fused vs frozen visual features")?;
    if fused_vis.n_rows() == 0 {
        return Err(Error::EmptyMatrix);
    }
    fused_vis.check_unit_rows(ROW_UNIT_TOLERANCE)?;
    frozen_vis.check_unit_rows(ROW_UNIT_TOLERANCE)?;
    let s: f64 = fused_vis
        .rows()
        .zip(frozen_vis.rows())
        .map(|(f, z)| 1.0 - dot(f, z))
        .sum();
    Ok(s / fused_vis.n_rows() as f64)
}

/// Mean `1 − ⟨f_txt_c, w_c⟩` over all classes.
pub fn consistency_txt(fused_txt: &FeatureMatrix, prototypes: &PrototypeBank) -> Result<f64> {
    if fused_txt.n_rows() != prototypes.num_classes() || fused_txt.dim() != prototypes.dim() {
        return Err(Error::ShapeMismatch(format!(
            "fused text {}x{} vs {} prototypes of dim {}",
            fused_txt.n_rows(),
            fused_txt.dim(),
            prototypes.num_classes(),
            prototypes.dim()
        )));
    }
    fused_txt.check_unit_rows(ROW_UNIT_TOLERANCE)?;
    let s: f64 = fused_txt
        .rows()
        .zip(prototypes.prototypes())
        .map(|(f, w)| 1.0 - dot(f, w.as_slice()))
        .sum();
    Ok(s / fused_txt.n_rows() as f64)
}

/// `τ·⟨vis, txt_c⟩` for every class row.
pub fn logits(fused_vis_row: &[f64], fused_txt: &FeatureMatrix, tau: f64) -> Result<LogitVector> {
    check_tau(tau)?;
    if fused_vis_row.len() != fused_txt.dim() {
        return Err(Error::ShapeMismatch(format!(
            "visual dim {} vs text dim {}",
            fused_vis_row.len(),
            fused_txt.dim()
        )));
    }
    let values = fused_txt.rows().map(|t| tau * dot(fused_vis_row, t)).collect();
    Ok(LogitVector { values, tau })
}

/// Softmax probabilities with max subtraction.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// `log Σ exp(ℓ_c) − ℓ_label`, evaluated with max subtraction.
pub fn cross_entropy(logits: &LogitVector, label: usize) -> Result<f64> {
    cross_entropy_values(&logits.values, label)
}

pub(crate) fn cross_entropy_values(values: &[f64], label: usize) -> Result<f64> {
    if label >= values.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: values.len(),
        });
    }
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    // lse ≥ every logit analytically; clamp the rounding residue.
    Ok((lse - values[label]).max(0.0))
}

/// Frozen and prompt-branch features for one step, before fusion.
#[derive(Debug, Clone, Copy)]
pub struct FeatureBatch<'a> {
    pub frozen_vis: &'a FeatureMatrix,
    pub prompt_vis: &'a FeatureMatrix,
    pub frozen_txt: &'a FeatureMatrix,
    pub prompt_txt: &'a FeatureMatrix,
    pub labels: &'a [usize],
}

/// Row-wise fusion of two unit-row matrices.
pub fn fuse_rows(frozen: &FeatureMatrix, prompt: &FeatureMatrix, margin: f64) -> Result<FeatureMatrix> {
    frozen.ensure_same_shape(prompt, "frozen vs prompt features")?;
    let d = frozen.dim();
    let mut out = vec![0.0; frozen.n_rows() * d];
    for ((o, z), h) in out.chunks_exact_mut(d).zip(frozen.rows()).zip(prompt.rows()) {
        let n = fused_sum(z, h, margin, o)?;
        o.iter_mut().for_each(|x| *x /= n);
    }
    FeatureMatrix::new_normalized(out, frozen.n_rows(), d)
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn mean_cross_entropy(fused_vis: &FeatureMatrix, fused_txt: &FeatureMatrix, labels: &[usize], tau: f64) -> Result<f64> {
    let mut s = 0.0;
    for (row, &y) in fused_vis.rows().zip(labels) {
        s += cross_entropy(&logits(row, fused_txt, tau)?, y)?;
    }
    Ok(s / fused_vis.n_rows() as f64)
}

/// Fuses both towers, then returns `L_ce + λ(L_img + L_txt)` and its parts.
pub fn total_loss(batch: &FeatureBatch<'_>, prototypes: &PrototypeBank, lambda: f64, tau: f64) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    check_tau(tau)?;
    if batch.frozen_vis.n_rows() == 0 {
        return Err(Error::EmptyMatrix);
    }
    check_labels(batch.labels, batch.frozen_vis.n_rows(), prototypes.num_classes())?;
    let fused_vis = fuse_rows(batch.frozen_vis, batch.prompt_vis, DEFAULT_OPPOSITION_MARGIN)?;
    let fused_txt = fuse_rows(batch.frozen_txt, batch.prompt_txt, DEFAULT_OPPOSITION_MARGIN)?;
    let ce = mean_cross_entropy(&fused_vis, &fused_txt, batch.labels, tau)?;
    let img = consistency_img(&fused_vis, batch.frozen_vis)?;
    let txt = consistency_txt(&fused_txt, prototypes)?;
    Ok(LossBreakdown::compose(ce, img, txt, lambda))
}

/// Weights and fusion margin of the training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub lambda: f64,
    pub tau: f64,
    pub margin: f64,
}

impl Objective {
    pub fn new(lambda: f64, tau: f64) -> Result<Self> {
        check_lambda(lambda)?;
        check_tau(tau)?;
        Ok(Self {
            lambda,
            tau,
            margin: DEFAULT_OPPOSITION_MARGIN,
        })
    }
}

/// Frozen inputs of one full-batch step.
#[derive(Debug, Clone, Copy)]
pub struct TrainBatch<'a> {
    pub frozen_vis: &'a FeatureMatrix,
    pub frozen_txt: &'a FeatureMatrix,
    pub labels: &'a [usize],
}

/// One tower's forward state: pre-normalization norms are kept for backprop.
#[derive(Debug, Clone)]
struct Tower {
    prompt: Vec<f64>,
    prompt_norm: Vec<f64>,
    fused: Vec<f64>,
    fused_norm: Vec<f64>,
}

fn tower_forward(frozen: &FeatureMatrix, map: &[f64], bias: &[f64], margin: f64) -> Result<Tower> {
    let d = frozen.dim();
    let n = frozen.n_rows();
    let mut prompt = vec![0.0; n * d];
    let mut prompt_norm = vec![0.0; n];
    let mut fused = vec![0.0; n * d];
    let mut fused_norm = vec![0.0; n];
    for i in 0..n {
        let z = frozen.row(i);
        let h = &mut prompt[i * d..(i + 1) * d];
        perturb(z, map, bias, h);
        let u = dot(h, h).sqrt();
        if !(u > crate::sphere::DEFAULT_ZERO_THRESHOLD) {
            return Err(Error::ZeroNorm {
                norm: u,
                threshold: crate::sphere::DEFAULT_ZERO_THRESHOLD,
            });
        }
        h.iter_mut().for_each(|x| *x /= u);
        prompt_norm[i] = u;
        let f = &mut fused[i * d..(i + 1) * d];
        let s = fused_sum(z, &prompt[i * d..(i + 1) * d], margin, f)?;
        f.iter_mut().for_each(|x| *x /= s);
        fused_norm[i] = s;
    }
    Ok(Tower {
        prompt,
        prompt_norm,
        fused,
        fused_norm,
    })
}

/// Prompt-branch and fused features produced by a parameter setting.
#[derive(Debug, Clone)]
pub struct Forward {
    pub prompt_vis: FeatureMatrix,
    pub fused_vis: FeatureMatrix,
    pub prompt_txt: FeatureMatrix,
    pub fused_txt: FeatureMatrix,
}

fn check_params(batch: &TrainBatch<'_>, params: &PromptParams) -> Result<()> {
    let d = batch.frozen_vis.dim();
    if batch.frozen_txt.dim() != d || params.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "visual dim {d}, text dim {}, params dim {}",
            batch.frozen_txt.dim(),
            params.dim()
        )));
    }
    Ok(())
}

/// Runs both towers through the prompt branch and the fusion.
pub fn forward(frozen_vis: &FeatureMatrix, frozen_txt: &FeatureMatrix, params: &PromptParams, margin: f64) -> Result<Forward> {
    let d = frozen_vis.dim();
    if frozen_txt.dim() != d || params.dim() != d {
        return Err(Error::ShapeMismatch("dimension mismatch between towers and params".into()));
    }
    let vis = tower_forward(frozen_vis, &params.vis_map, &params.vis_bias, margin)?;
    let txt = tower_forward(frozen_txt, &params.txt_map, &params.txt_bias, margin)?;
    let n = frozen_vis.n_rows();
    let c = frozen_txt.n_rows();
    Ok(Forward {
        prompt_vis: FeatureMatrix::new_normalized(vis.prompt, n, d)?,
        fused_vis: FeatureMatrix::new_normalized(vis.fused, n, d)?,
        prompt_txt: FeatureMatrix::new_normalized(txt.prompt, c, d)?,
        fused_txt: FeatureMatrix::new_normalized(txt.fused, c, d)?,
    })
}

/// Objective value at `params` without gradients.
pub fn objective_value(batch: &TrainBatch<'_>, prototypes: &PrototypeBank, objective: &Objective, params: &PromptParams) -> Result<LossBreakdown> {
    check_params(batch, params)?;
    let fwd = forward(batch.frozen_vis, batch.frozen_txt, params, objective.margin)?;
    let fb = FeatureBatch {
        frozen_vis: batch.frozen_vis,
        prompt_vis: &fwd.prompt_vis,
        frozen_txt: batch.frozen_txt,
        prompt_txt: &fwd.prompt_txt,
        labels: batch.labels,
    };
    check_labels(batch.labels, batch.frozen_vis.n_rows(), prototypes.num_classes())?;
    let ce = mean_cross_entropy(&fwd.fused_vis, &fwd.fused_txt, fb.labels, objective.tau)?;
    let img = consistency_img(&fwd.fused_vis, batch.frozen_vis)?;
    let txt = consistency_txt(&fwd.fused_txt, prototypes)?;
    Ok(LossBreakdown::compose(ce, img, txt, objective.lambda))
}

/// `(I − y yᵀ) g / ‖x‖` for `y = x / ‖x‖`, in place on `g`.
fn backprop_normalize(y: &[f64], norm: f64, g: &mut [f64]) {
    let proj = dot(y, g);
    g.iter_mut().zip(y).for_each(|(gi, yi)| *gi = (*gi - proj * yi) / norm);
}

/// Accumulates gradients of one tower given `∂L/∂f` per row.
fn tower_backward(frozen: &FeatureMatrix, tower: &Tower, grad_fused: &mut [f64], map_grad: &mut [f64], bias_grad: &mut [f64]) {
    let d = frozen.dim();
    for i in 0..frozen.n_rows() {
        let g = &mut grad_fused[i * d..(i + 1) * d];
        backprop_normalize(&tower.fused[i * d..(i + 1) * d], tower.fused_norm[i], g);
        // ∂L/∂h equals ∂L/∂s since s = z + h.
        backprop_normalize(&tower.prompt[i * d..(i + 1) * d], tower.prompt_norm[i], g);
        let z = frozen.row(i);
        for r in 0..d {
            bias_grad[r] += g[r];
            let row = &mut map_grad[r * d..(r + 1) * d];
            row.iter_mut().zip(z).for_each(|(m, zj)| *m += g[r] * zj);
        }
    }
}

/// Loss breakdown and exact gradient with respect to every prompt parameter.
pub fn grad_total(batch: &TrainBatch<'_>, prototypes: &PrototypeBank, objective: &Objective, params: &PromptParams) -> Result<(LossBreakdown, PromptParams)> {
    check_params(batch, params)?;
    let n = batch.frozen_vis.n_rows();
    let c = batch.frozen_txt.n_rows();
    let d = batch.frozen_vis.dim();
    if n == 0 {
        return Err(Error::EmptyMatrix);
    }
    if c != prototypes.num_classes() || prototypes.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "{c} text rows vs {} prototypes",
            prototypes.num_classes()
        )));
    }
    check_labels(batch.labels, n, c)?;
    let tau = objective.tau;
    let lambda = objective.lambda;

    let vis = tower_forward(batch.frozen_vis, &params.vis_map, &params.vis_bias, objective.margin)?;
    let txt = tower_forward(batch.frozen_txt, &params.txt_map, &params.txt_bias, objective.margin)?;

    let mut g_vis = vec![0.0; n * d];
    let mut g_txt = vec![0.0; c * d];
    let mut ce = 0.0;
    let mut img = 0.0;
    let inv_n = 1.0 / n as f64;
    let mut ell = vec![0.0; c];
    for i in 0..n {
        let f = &vis.fused[i * d..(i + 1) * d];
        for (k, l) in ell.iter_mut().enumerate() {
            *l = tau * dot(f, &txt.fused[k * d..(k + 1) * d]);
        }
        let y = batch.labels[i];
        ce += cross_entropy_values(&ell, y)?;
        let mut p = softmax(&ell);
        p[y] -= 1.0;
        let gf = &mut g_vis[i * d..(i + 1) * d];
        let z = batch.frozen_vis.row(i);
        img += 1.0 - dot(f, z);
        for (k, pk) in p.iter().enumerate() {
            let dl = pk * inv_n * tau;
            let g = &txt.fused[k * d..(k + 1) * d];
            gf.iter_mut().zip(g).for_each(|(a, b)| *a += dl * b);
            let gt = &mut g_txt[k * d..(k + 1) * d];
            gt.iter_mut().zip(f).for_each(|(a, b)| *a += dl * b);
        }
        gf.iter_mut().zip(z).for_each(|(a, b)| *a -= lambda * inv_n * b);
    }
    let inv_c = 1.0 / c as f64;
    let mut txt_loss = 0.0;
    for k in 0..c {
        let w = prototypes.prototype(k).as_slice();
        txt_loss += 1.0 - dot(&txt.fused[k * d..(k + 1) * d], w);
        let gt = &mut g_txt[k * d..(k + 1) * d];
        gt.iter_mut().zip(w).for_each(|(a, b)| *a -= lambda * inv_c * b);
    }
    let breakdown = LossBreakdown::compose(ce * inv_n, img * inv_n, txt_loss * inv_c, lambda);

    let mut grad = PromptParams::zeros(d);
    tower_backward(batch.frozen_vis, &vis, &mut g_vis, &mut grad.vis_map, &mut grad.vis_bias);
    tower_backward(batch.frozen_txt, &txt, &mut g_txt, &mut grad.txt_map, &mut grad.txt_bias);
    Ok((breakdown, grad))
}
