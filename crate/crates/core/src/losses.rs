//! Loss terms of the DerProp objective and their closed-form gradients.
//!
//! Gradients flow into the student features `V` and logits `L` only. Pseudo
//! labels, confidence masks and weak-branch similarity targets are constants.
//! The subgradient of `|x|` at `x = 0` is taken as 0.

use serde::{Deserialize, Serialize};

use crate::derivative::{diff_columns, diff_columns_adjoint, DerivativeVariant};
use crate::error::{Error, Result};
use crate::similarity::{
    derivative_similarity, gram, gt_similarity_from_label_map, scaled_propagate, KernelScale, SimilarityKind,
    SimilarityMatrix,
};
use crate::tensor::{softmax_columns, LabelMap, ProbMap, Tensor};

/// Probabilities are clamped to at least this before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Weights of the overall objective plus the sparsity weight `η`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_kl: f64,
    pub lambda_der: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 0.5,
            lambda_kl: 0.25,
            lambda_der: 0.5,
            eta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_ce, self.lambda_kl, self.lambda_der, self.eta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// What labeled samples compare `Δ^q S` against for `q ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighOrderTarget {
    /// The label Gram matrix `YᵀY`, same as for `q = 0`.
    Ygram,
    /// The all-zero matrix.
    Zero,
    /// `(Δ^q Y)ᵀ(Δ^q Y)`: the order-`q` similarity of the one-hot label
    /// columns, treating `Y` as a `C`-channel feature map. Needs `C > q`.
    LabelDerivative,
}

/// How each entrywise L1 term is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Plain sum of absolute values.
    Sum,
    /// Sum divided by the number of entries of that term.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DerLossSpec {
    /// Highest similarity order `Q` compared explicitly.
    pub order_budget: usize,
    pub eta: f64,
    pub variant: DerivativeVariant,
    pub sparsity_enabled: bool,
    pub labeled_high_order_target: HighOrderTarget,
    pub reduction: Reduction,
}

impl Default for DerLossSpec {
    fn default() -> Self {
        Self {
            order_budget: 1,
            eta: 0.5,
            variant: DerivativeVariant::Forward,
            sparsity_enabled: true,
            labeled_high_order_target: HighOrderTarget::Ygram,
            reduction: Reduction::Sum,
        }
    }
}

impl DerLossSpec {
    /// Checks the order budget against a `dim`-channel feature map.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let needed = self.order_budget + usize::from(self.sparsity_enabled);
        if self.variant.output_dim(needed, dim).is_err() {
            return Err(Error::OrderBudget {
                order_budget: self.order_budget,
                dim,
                variant: self.variant,
            });
        }
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(Error::InvalidArgument(format!("eta must be >= 0, got {}", self.eta)));
        }
        Ok(())
    }

    fn reduce(&self, sum: f64, entries: usize) -> f64 {
        match self.reduction {
            Reduction::Sum => sum,
            Reduction::Mean => sum / entries as f64,
        }
    }

    fn reduce_scale(&self, entries: usize) -> f64 {
        match self.reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / entries as f64,
        }
    }
}

/// `[Δ⁰S, Δ¹S, …, Δ^Q S]` of the student features.
pub fn prediction_stack(v: &Tensor, order_budget: usize, variant: DerivativeVariant) -> Result<Vec<SimilarityMatrix>> {
    (0..=order_budget)
        .map(|q| derivative_similarity(v, q, variant))
        .collect()
}

/// Targets for a labeled sample: `YᵀY` at `q = 0` and, for `q ≥ 1`, one of
/// the [`HighOrderTarget`] readings.
pub fn labeled_target_stack(
    labels: &LabelMap,
    order_budget: usize,
    target: HighOrderTarget,
    variant: DerivativeVariant,
) -> Result<Vec<SimilarityMatrix>> {
    let ygram = gt_similarity_from_label_map(labels);
    let m = labels.pixels();
    let y = labels.one_hot();
    (0..=order_budget)
        .map(|q| match (q, target) {
            (0, _) | (_, HighOrderTarget::Ygram) => Ok(ygram.clone()),
            (_, HighOrderTarget::Zero) => Ok(SimilarityMatrix {
                values: Tensor::zeros(vec![m, m]),
                kind: SimilarityKind::GtFromLabels,
            }),
            (_, HighOrderTarget::LabelDerivative) => derivative_similarity(&y, q, variant).map(|mut s| {
                s.kind = SimilarityKind::GtFromLabels;
                s
            }),
        })
        .collect()
}

/// `C × C` table of `(Δ^q e_a)ᵀ(Δ^q e_b)` over one-hot class vectors, row-major.
fn class_target_table(classes: usize, q: usize, target: HighOrderTarget, variant: DerivativeVariant) -> Result<Vec<f64>> {
    Ok(match (q, target) {
        (0, _) | (_, HighOrderTarget::Ygram) => Tensor::identity(classes).into_data(),
        (_, HighOrderTarget::Zero) => vec![0.0; classes * classes],
        (_, HighOrderTarget::LabelDerivative) => {
            derivative_similarity(&Tensor::identity(classes), q, variant)?.values.into_data()
        }
    })
}

/// Targets for an unlabeled sample: `(Δ^q V^w)ᵀ(Δ^q V^w)` from the weak branch.
pub fn unlabeled_target_stack(v_weak: &Tensor, order_budget: usize, variant: DerivativeVariant) -> Result<Vec<SimilarityMatrix>> {
    (0..=order_budget)
        .map(|q| {
            derivative_similarity(v_weak, q, variant).map(|mut s| {
                s.kind = SimilarityKind::GtFromWeakFeatures;
                s
            })
        })
        .collect()
}

fn check_stacks(s_pred: &[SimilarityMatrix], s_gt: &[SimilarityMatrix], spec: &DerLossSpec) -> Result<()> {
    let expected = spec.order_budget + 1;
    for stack in [s_pred, s_gt] {
        if stack.len() != expected {
            return Err(Error::StackLength {
                expected,
                found: stack.len(),
            });
        }
    }
    for (a, b) in s_pred.iter().zip(s_gt) {
        if a.values.dims() != b.values.dims() {
            return Err(Error::ShapeMismatch {
                op: "derivative_loss",
                expected: format!("{:?}", a.values.dims()),
                found: format!("{:?}", b.values.dims()),
            });
        }
    }
    Ok(())
}

fn abs_diff_sum(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum()
}

/// `Σ_{q=0..Q} ‖Δ^q S_pred − Δ^q S_gt‖₁ + η ‖Δ^{Q+1} V‖₁` (sparsity term optional).
pub fn derivative_loss(
    s_pred: &[SimilarityMatrix],
    s_gt: &[SimilarityMatrix],
    v: &Tensor,
    spec: &DerLossSpec,
) -> Result<f64> {
    check_stacks(s_pred, s_gt, spec)?;
    let (d, _) = v.matrix_shape("derivative_loss")?;
    spec.validate(d)?;
    let mut total = 0.0;
    for (p, g) in s_pred.iter().zip(s_gt) {
        total += spec.reduce(abs_diff_sum(&p.values, &g.values), p.values.len());
    }
    if spec.sparsity_enabled {
        let high = diff_columns(v, spec.order_budget + 1, spec.variant)?;
        let sparsity: f64 = high.data().iter().map(|x| x.abs()).sum();
        total += spec.eta * spec.reduce(sparsity, high.len());
    }
    Ok(total)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Value and feature gradient of [`derivative_loss`] with the prediction
/// stack computed from `v`.
pub fn derivative_loss_grad(v: &Tensor, s_gt: &[SimilarityMatrix], spec: &DerLossSpec) -> Result<(f64, Tensor)> {
    let (d, m) = v.matrix_shape("derivative_loss_grad")?;
    spec.validate(d)?;
    if s_gt.len() != spec.order_budget + 1 {
        return Err(Error::StackLength {
            expected: spec.order_budget + 1,
            found: s_gt.len(),
        });
    }
    let mut total = 0.0;
    let mut grad = Tensor::zeros(vec![d, m]);
    for (q, g) in s_gt.iter().enumerate() {
        if g.values.dims() != [m, m] {
            return Err(Error::ShapeMismatch {
                op: "derivative_loss_grad",
                expected: format!("[{m}, {m}]"),
                found: format!("{:?}", g.values.dims()),
            });
        }
        let w = diff_columns(v, q, spec.variant)?;
        let s = gram(&w);
        let scale = spec.reduce_scale(m * m);
        total += spec.reduce(abs_diff_sum(&s, &g.values), m * m);
        // ∂/∂W Σ|WᵀW − G| = W (R + Rᵀ), R = sign(WᵀW − G)
        let r: Vec<f64> = s
            .data()
            .iter()
            .zip(g.values.data())
            .map(|(a, b)| sign(a - b))
            .collect();
        let mut rs = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                rs[i * m + j] = scale * (r[i * m + j] + r[j * m + i]);
            }
        }
        let dw = w.matmul(&Tensor::from_parts(vec![m, m], rs))?;
        let dv = diff_columns_adjoint(&dw, q, spec.variant);
        accumulate(&mut grad, &dv);
    }
    if spec.sparsity_enabled {
        let order = spec.order_budget + 1;
        let high = diff_columns(v, order, spec.variant)?;
        let sparsity: f64 = high.data().iter().map(|x| x.abs()).sum();
        total += spec.eta * spec.reduce(sparsity, high.len());
        let k = spec.eta * spec.reduce_scale(high.len());
        let dh = high.map(|x| k * sign(x));
        accumulate(&mut grad, &diff_columns_adjoint(&dh, order, spec.variant));
    }
    Ok((total, grad))
}

/// Where the derivative-loss targets of one sample come from.
#[derive(Debug, Clone, Copy)]
pub enum DerTargets<'a> {
    /// Weak-branch features: `Δ^q S^GT = (Δ^q V^w)ᵀ(Δ^q V^w)`.
    Features(&'a Tensor),
    /// Ground-truth labels, as in [`labeled_target_stack`].
    Labels(&'a LabelMap, HighOrderTarget),
}

fn pixel_major(t: &Tensor) -> Vec<f64> {
    t.transpose().into_data()
}

/// Same value and gradient as [`derivative_loss_grad`] on the corresponding
/// target stack, computed pair by pair without any `M × M` buffer. Both
/// `Δ^q S` and its target are symmetric, so `R + Rᵀ = 2R`.
pub fn derivative_loss_grad_fused(v: &Tensor, targets: DerTargets<'_>, spec: &DerLossSpec) -> Result<(f64, Tensor)> {
    let (d, m) = v.matrix_shape("derivative_loss_grad_fused")?;
    spec.validate(d)?;
    match targets {
        DerTargets::Features(t) if t.dims() != v.dims() => {
            return Err(Error::ShapeMismatch {
                op: "derivative_loss_grad_fused",
                expected: format!("{:?}", v.dims()),
                found: format!("{:?}", t.dims()),
            })
        }
        DerTargets::Labels(l, _) if l.pixels() != m => {
            return Err(Error::ShapeMismatch {
                op: "derivative_loss_grad_fused",
                expected: format!("{m} labels"),
                found: format!("{}", l.pixels()),
            })
        }
        _ => {}
    }
    let mut total = 0.0;
    let mut grad = Tensor::zeros(vec![d, m]);
    let scale = spec.reduce_scale(m * m);
    for q in 0..=spec.order_budget {
        let w = diff_columns(v, q, spec.variant)?;
        let dq = w.rows();
        let wt = pixel_major(&w);
        let teacher = match targets {
            DerTargets::Features(t) => Some(pixel_major(&diff_columns(t, q, spec.variant)?)),
            DerTargets::Labels(..) => None,
        };
        let table = match targets {
            DerTargets::Labels(l, target) => class_target_table(l.classes(), q, target, spec.variant)?,
            DerTargets::Features(_) => Vec::new(),
        };
        let mut dwt = vec![0.0; m * dq];
        let mut sum = 0.0;
        for i in 0..m {
            let wi = &wt[i * dq..(i + 1) * dq];
            for j in i..m {
                let wj = &wt[j * dq..(j + 1) * dq];
                let s: f64 = wi.iter().zip(wj).map(|(a, b)| a * b).sum();
                let g = match (targets, &teacher) {
                    (_, Some(ut)) => ut[i * dq..(i + 1) * dq]
                        .iter()
                        .zip(&ut[j * dq..(j + 1) * dq])
                        .map(|(a, b)| a * b)
                        .sum(),
                    (DerTargets::Labels(l, _), None) => {
                        let c = l.classes();
                        table[l.labels()[i] * c + l.labels()[j]]
                    }
                    (DerTargets::Features(_), None) => unreachable!(),
                };
                let diff = s - g;
                let r = 2.0 * scale * sign(diff);
                if i == j {
                    sum += diff.abs();
                    for (o, &x) in dwt[i * dq..(i + 1) * dq].iter_mut().zip(wi) {
                        *o += r * x;
                    }
                } else {
                    sum += 2.0 * diff.abs();
                    if r != 0.0 {
                        for k in 0..dq {
                            dwt[i * dq + k] += r * wj[k];
                            dwt[j * dq + k] += r * wi[k];
                        }
                    }
                }
            }
        }
        total += spec.reduce(sum, m * m);
        let dw = Tensor::from_parts(vec![m, dq], dwt).transpose();
        accumulate(&mut grad, &diff_columns_adjoint(&dw, q, spec.variant));
    }
    if spec.sparsity_enabled {
        let order = spec.order_budget + 1;
        let high = diff_columns(v, order, spec.variant)?;
        let sparsity: f64 = high.data().iter().map(|x| x.abs()).sum();
        total += spec.eta * spec.reduce(sparsity, high.len());
        let k = spec.eta * spec.reduce_scale(high.len());
        let dh = high.map(|x| k * sign(x));
        accumulate(&mut grad, &diff_columns_adjoint(&dh, order, spec.variant));
    }
    Ok((total, grad))
}

fn accumulate(into: &mut Tensor, from: &Tensor) {
    debug_assert_eq!(into.dims(), from.dims());
    for (a, b) in into.data_mut().iter_mut().zip(from.data()) {
        *a += b;
    }
}

fn check_pixelwise(op: &'static str, p: &Tensor, target: &Tensor, mask: &[bool]) -> Result<()> {
    if p.dims() != target.dims() || mask.len() != p.cols() {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("target {:?} and mask of {}", p.dims(), p.cols()),
            found: format!("target {:?} and mask of {}", target.dims(), mask.len()),
        });
    }
    Ok(())
}

/// Mean over masked pixels of `−Σ_c t_c log P_c`; zero when the mask is empty.
pub fn cross_entropy_masked(p: &ProbMap, target: &Tensor, mask: &[bool]) -> Result<f64> {
    let p = p.tensor();
    check_pixelwise("cross_entropy_masked", p, target, mask)?;
    let (c, m) = (p.rows(), p.cols());
    let mut total = 0.0;
    let mut count = 0usize;
    for j in (0..m).filter(|&j| mask[j]) {
        count += 1;
        for i in 0..c {
            let t = target.at(i, j);
            if t != 0.0 {
                total -= t * p.at(i, j).max(LOG_CLAMP).ln();
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Mean over masked pixels of `Σ_c t_c log(t_c / P_c)`; the target is the reference distribution.
pub fn kl_masked(p: &ProbMap, target: &Tensor, mask: &[bool]) -> Result<f64> {
    let p = p.tensor();
    check_pixelwise("kl_masked", p, target, mask)?;
    let (c, m) = (p.rows(), p.cols());
    let mut total = 0.0;
    let mut count = 0usize;
    for j in (0..m).filter(|&j| mask[j]) {
        count += 1;
        for i in 0..c {
            let t = target.at(i, j);
            if t != 0.0 {
                total += t * (t.max(LOG_CLAMP).ln() - p.at(i, j).max(LOG_CLAMP).ln());
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Gradient of a masked softmax-CE (or KL, which differs by a constant) w.r.t. logits.
fn softmax_target_grad(p: &Tensor, target: &Tensor, mask: &[bool]) -> Tensor {
    let (c, m) = (p.rows(), p.cols());
    let count = mask.iter().filter(|&&b| b).count();
    let mut g = Tensor::zeros(vec![c, m]);
    if count == 0 {
        return g;
    }
    let inv = 1.0 / count as f64;
    for j in (0..m).filter(|&j| mask[j]) {
        let mass: f64 = (0..c).map(|i| target.at(i, j)).sum();
        for i in 0..c {
            g.data_mut()[i * m + j] = inv * (mass * p.at(i, j) - target.at(i, j));
        }
    }
    g
}

/// Masked cross-entropy of `softmax(logits)` and its logit gradient.
pub fn softmax_cross_entropy_grad(logits: &Tensor, target: &Tensor, mask: &[bool]) -> Result<(f64, Tensor)> {
    let p = softmax_columns(logits);
    let loss = cross_entropy_masked(&p, target, mask)?;
    Ok((loss, softmax_target_grad(p.tensor(), target, mask)))
}

/// Masked KL of `softmax(logits)` from `target` and its logit gradient.
pub fn softmax_kl_grad(logits: &Tensor, target: &Tensor, mask: &[bool]) -> Result<(f64, Tensor)> {
    let p = softmax_columns(logits);
    let loss = kl_masked(&p, target, mask)?;
    Ok((loss, softmax_target_grad(p.tensor(), target, mask)))
}

/// Given `∂f/∂L̃` for `L̃ = L (VᵀV + WᵀW)` with `W = Δ¹V`, returns `(∂f/∂L, ∂f/∂V)`.
pub(crate) fn rectification_backward(
    g: &Tensor,
    logits: &Tensor,
    v: &Tensor,
    variant: DerivativeVariant,
) -> Result<(Tensor, Tensor)> {
    let w = diff_columns(v, 1, variant)?;
    let mut d_logits = g.matmul(&v.transpose())?.matmul(v)?;
    accumulate(&mut d_logits, &g.matmul(&w.transpose())?.matmul(&w)?);
    // ∂/∂X tr(Gᵀ L XᵀX) = (X Gᵀ) L + (X Lᵀ) G
    let gram_grad = |x: &Tensor| -> Result<Tensor> {
        let mut out = x.matmul(&g.transpose())?.matmul(logits)?;
        accumulate(&mut out, &x.matmul(&logits.transpose())?.matmul(g)?);
        Ok(out)
    };
    let mut d_v = gram_grad(v)?;
    accumulate(&mut d_v, &diff_columns_adjoint(&gram_grad(&w)?, 1, variant));
    Ok((d_logits, d_v))
}

/// Masked CE of `softmax(L (S + Δ¹S))` with gradients w.r.t. `L` and `V`.
pub fn rectified_cross_entropy_grad(
    logits: &Tensor,
    v: &Tensor,
    target: &Tensor,
    mask: &[bool],
    variant: DerivativeVariant,
    scale: KernelScale,
) -> Result<(f64, Tensor, Tensor)> {
    let rectified = scaled_propagate(logits, v, variant, scale)?;
    let (loss, g) = softmax_cross_entropy_grad(&rectified, target, mask)?;
    let k = scale.factor(v.rows(), v.cols());
    let g = if k == 1.0 { g } else { g.scale(k) };
    let (dl, dv) = rectification_backward(&g, logits, v, variant)?;
    Ok((loss, dl, dv))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub kl: f64,
    pub der: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.kl.is_finite() && self.der.is_finite()
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [("ce", self.ce), ("kl", self.kl), ("der", self.der)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// `λ^CE·ce + λ^KL·kl + λ^Der·der`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    w.lambda_ce * parts.ce + w.lambda_kl * parts.kl + w.lambda_der * parts.der
}

/// Supervision attached to one student prediction.
#[derive(Debug, Clone, Copy)]
pub enum SampleTargets<'a> {
    Labeled {
        labels: &'a LabelMap,
    },
    Unlabeled {
        /// Blended pseudo-labels `P̄`.
        pseudo: &'a ProbMap,
        /// High-confidence pixels of `P̄`.
        mask: &'a [bool],
        /// Weak-branch features `V^w`, the source of similarity targets.
        teacher_features: &'a Tensor,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    /// Student features `[D, M]`, L1-normalized.
    pub features: &'a Tensor,
    /// Student logits `[C, M]`.
    pub logits: &'a Tensor,
    pub targets: SampleTargets<'a>,
}

/// Which optional terms of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    /// Include the CE term on rectified predictions `softmax(L (S + Δ¹S))`.
    pub rectified_ce: bool,
    /// Include the derivative loss.
    pub derivative: bool,
    /// Factor on `S + Δ¹S` inside the rectified CE term.
    pub kernel_scale: KernelScale,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            rectified_ce: true,
            derivative: true,
            kernel_scale: KernelScale::Unit,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub parts: LossParts,
    pub total: f64,
    pub d_features: Tensor,
    pub d_logits: Tensor,
}

fn scaled(t: Tensor, k: f64) -> Tensor {
    if k == 1.0 {
        t
    } else {
        t.scale(k)
    }
}

/// Loss parts, weighted total and analytic gradients for one sample.
pub fn loss_gradients(
    inputs: &LossInputs<'_>,
    spec: &DerLossSpec,
    w: &LossWeights,
    toggles: LossToggles,
) -> Result<Gradients> {
    let v = inputs.features;
    let l = inputs.logits;
    let (d, m) = v.matrix_shape("loss_gradients")?;
    let (c, ml) = l.matrix_shape("loss_gradients")?;
    if m != ml {
        return Err(Error::ShapeMismatch {
            op: "loss_gradients",
            expected: format!("logits with {m} pixels"),
            found: format!("{ml}"),
        });
    }
    let mut parts = LossParts::default();
    let mut d_v = Tensor::zeros(vec![d, m]);
    let mut d_l = Tensor::zeros(vec![c, m]);

    let (target, mask, half, der_targets) = match inputs.targets {
        SampleTargets::Labeled { labels } => {
            if labels.pixels() != m || labels.classes() != c {
                return Err(Error::ShapeMismatch {
                    op: "loss_gradients",
                    expected: format!("{c} classes over {m} pixels"),
                    found: format!("{} classes over {}", labels.classes(), labels.pixels()),
                });
            }
            let der = DerTargets::Labels(labels, spec.labeled_high_order_target);
            (labels.one_hot(), vec![true; m], 1.0, der)
        }
        SampleTargets::Unlabeled {
            pseudo,
            mask,
            teacher_features,
        } => {
            let (kl, g) = softmax_kl_grad(l, pseudo.tensor(), mask)?;
            parts.kl = kl;
            accumulate(&mut d_l, &scaled(g, w.lambda_kl));
            let half = if toggles.rectified_ce { 0.5 } else { 1.0 };
            (pseudo.tensor().clone(), mask.to_vec(), half, DerTargets::Features(teacher_features))
        }
    };

    let (ce, g) = softmax_cross_entropy_grad(l, &target, &mask)?;
    parts.ce += half * ce;
    accumulate(&mut d_l, &scaled(g, half * w.lambda_ce));
    if toggles.rectified_ce {
        let (ce_r, gl, gv) = rectified_cross_entropy_grad(l, v, &target, &mask, spec.variant, toggles.kernel_scale)?;
        parts.ce += half * ce_r;
        accumulate(&mut d_l, &scaled(gl, half * w.lambda_ce));
        accumulate(&mut d_v, &scaled(gv, half * w.lambda_ce));
    }
    if toggles.derivative {
        let (der, gv) = derivative_loss_grad_fused(v, der_targets, spec)?;
        parts.der = der;
        accumulate(&mut d_v, &scaled(gv, w.lambda_der));
    }
    Ok(Gradients {
        parts,
        total: total_loss(&parts, w),
        d_features: d_v,
        d_logits: d_l,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::similarity_matrix;
    use crate::tensor::{l1_normalize_columns, ZeroPolicy};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, d: usize, m: usize) -> Tensor {
        let raw = Tensor::matrix(d, m, (0..d * m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        l1_normalize_columns(&raw, ZeroPolicy::Error).unwrap()
    }

    #[test]
    fn derivative_loss_zero_when_matched() {
        // Dyadic affine columns, so Δ²V is exactly 0; the targets are the predictions themselves.
        let v = Tensor::from_rows(&[[0.125, 0.5], [0.25, 0.375], [0.375, 0.25], [0.5, 0.125]]).unwrap();
        let spec = DerLossSpec::default();
        let stack = prediction_stack(&v, 1, DerivativeVariant::Forward).unwrap();
        assert_eq!(derivative_loss(&stack, &stack, &v, &spec).unwrap(), 0.0);
    }

    #[test]
    fn fused_gradient_matches_stack_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (q, sparsity, reduction) in [(0, true, Reduction::Sum), (1, true, Reduction::Mean), (2, false, Reduction::Sum)] {
            let spec = DerLossSpec {
                order_budget: q,
                sparsity_enabled: sparsity,
                reduction,
                ..DerLossSpec::default()
            };
            let v = random_features(&mut rng, 6, 9);
            let vw = random_features(&mut rng, 6, 9);
            let (a, ga) = derivative_loss_grad(&v, &unlabeled_target_stack(&vw, q, spec.variant).unwrap(), &spec).unwrap();
            let (b, gb) = derivative_loss_grad_fused(&v, DerTargets::Features(&vw), &spec).unwrap();
            assert!((a - b).abs() < 1e-12 && ga.max_abs_diff(&gb) < 1e-12);
            let labels = LabelMap::new(3, (0..9).map(|i| i % 3).collect()).unwrap();
            for target in [HighOrderTarget::Ygram, HighOrderTarget::Zero, HighOrderTarget::LabelDerivative] {
                let stack = labeled_target_stack(&labels, q, target, spec.variant).unwrap();
                let (a, ga) = derivative_loss_grad(&v, &stack, &spec).unwrap();
                let (b, gb) = derivative_loss_grad_fused(&v, DerTargets::Labels(&labels, target), &spec).unwrap();
                assert!((a - b).abs() < 1e-12 && ga.max_abs_diff(&gb) < 1e-12);
            }
        }
    }

    #[test]
    fn derivative_loss_single_pixel_by_hand() {
        let v = Tensor::from_rows(&[[0.5], [0.3], [0.2]]).unwrap();
        let spec = DerLossSpec::default();
        let labels = LabelMap::new(2, vec![1]).unwrap();
        let pred = prediction_stack(&v, 1, DerivativeVariant::Forward).unwrap();
        let gt = labeled_target_stack(&labels, 1, HighOrderTarget::Ygram, DerivativeVariant::Forward).unwrap();
        // S = 0.25 + 0.09 + 0.04 = 0.38; Δ¹v = [−0.2, −0.1], Δ¹S = 0.05; Δ²v = [0.1].
        let expect = (0.38f64 - 1.0).abs() + (0.05f64 - 1.0).abs() + 0.5 * 0.1;
        let got = derivative_loss(&pred, &gt, &v, &spec).unwrap();
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");

        let zero_gt = labeled_target_stack(&labels, 1, HighOrderTarget::Zero, DerivativeVariant::Forward).unwrap();
        let expect_zero = 0.62 + 0.05 + 0.05;
        let got = derivative_loss(&pred, &zero_gt, &v, &spec).unwrap();
        assert!((got - expect_zero).abs() < 1e-15);
    }

    #[test]
    fn derivative_loss_rejects_bad_stacks() {
        let v = Tensor::from_rows(&[[0.5], [0.3], [0.2]]).unwrap();
        let spec = DerLossSpec::default();
        let pred = prediction_stack(&v, 0, DerivativeVariant::Forward).unwrap();
        assert_eq!(
            derivative_loss(&pred, &pred, &v, &spec),
            Err(Error::StackLength { expected: 2, found: 1 })
        );
        let deep = DerLossSpec { order_budget: 2, ..spec };
        let pred = prediction_stack(&v, 2, DerivativeVariant::Forward).unwrap();
        assert!(matches!(
            derivative_loss(&pred, &pred, &v, &deep),
            Err(Error::OrderBudget { order_budget: 2, dim: 3, .. })
        ));
        let no_sparsity = DerLossSpec { sparsity_enabled: false, ..deep };
        assert!(derivative_loss(&pred, &pred, &v, &no_sparsity).is_ok());
    }

    #[test]
    fn grad_value_matches_loss_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = random_features(&mut rng, 6, 5);
        let vw = random_features(&mut rng, 6, 5);
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let spec = DerLossSpec { order_budget: 2, reduction, ..Default::default() };
            let gt = unlabeled_target_stack(&vw, 2, spec.variant).unwrap();
            let pred = prediction_stack(&v, 2, spec.variant).unwrap();
            let direct = derivative_loss(&pred, &gt, &v, &spec).unwrap();
            let (via_grad, _) = derivative_loss_grad(&v, &gt, &spec).unwrap();
            assert!((direct - via_grad).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_examples() {
        let y = LabelMap::new(2, vec![0, 1]).unwrap().one_hot();
        let p = ProbMap::new(y.clone()).unwrap();
        assert!(cross_entropy_masked(&p, &y, &[true, true]).unwrap().abs() < 1e-9);
        let uniform = ProbMap::new(Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap()).unwrap();
        let ce = cross_entropy_masked(&uniform, &y, &[true, true]).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-15);
        assert_eq!(cross_entropy_masked(&uniform, &y, &[false, false]).unwrap(), 0.0);
    }

    #[test]
    fn kl_examples() {
        let t = Tensor::from_rows(&[[1.0, 0.3], [0.0, 0.7]]).unwrap();
        let same = ProbMap::new(t.clone()).unwrap();
        assert!(kl_masked(&same, &t, &[true, true]).unwrap().abs() < 1e-15);
        let uniform = ProbMap::new(Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap()).unwrap();
        let kl = kl_masked(&uniform, &t, &[true, false]).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl_masked(&uniform, &t, &[false, false]).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let ones = LossParts { ce: 1.0, kl: 1.0, der: 1.0 };
        assert_eq!(total_loss(&ones, &w), 1.25);
        assert_eq!(total_loss(&LossParts::default(), &w), 0.0);
        let doubled = LossWeights {
            lambda_ce: 1.0,
            lambda_kl: 0.5,
            lambda_der: 1.0,
            eta: 0.5,
        };
        let parts = LossParts { ce: 0.3, kl: 1.7, der: 2.2 };
        assert!((total_loss(&parts, &doubled) - 2.0 * total_loss(&parts, &w)).abs() < 1e-15);
    }

    #[test]
    fn scaling_weights_scales_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_features(&mut rng, 5, 6);
        let l = Tensor::matrix(3, 6, (0..18).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let labels = LabelMap::new(3, vec![0, 1, 2, 0, 1, 2]).unwrap();
        let inputs = LossInputs {
            features: &v,
            logits: &l,
            targets: SampleTargets::Labeled { labels: &labels },
        };
        let spec = DerLossSpec::default();
        let w = LossWeights::default();
        let w3 = LossWeights {
            lambda_ce: 3.0 * w.lambda_ce,
            lambda_kl: 3.0 * w.lambda_kl,
            lambda_der: 3.0 * w.lambda_der,
            eta: w.eta,
        };
        let g1 = loss_gradients(&inputs, &spec, &w, LossToggles::default()).unwrap();
        let g3 = loss_gradients(&inputs, &spec, &w3, LossToggles::default()).unwrap();
        assert!(g3.d_features.max_abs_diff(&g1.d_features.scale(3.0)) < 1e-10);
        assert!(g3.d_logits.max_abs_diff(&g1.d_logits.scale(3.0)) < 1e-10);
        assert!((g3.total - 3.0 * g1.total).abs() < 1e-10);
    }

    #[test]
    fn unmasked_pixels_have_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let t = softmax_columns(&Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap());
        let mask = [true, false, true, false];
        let (_, g) = softmax_cross_entropy_grad(&l, t.tensor(), &mask).unwrap();
        for i in 0..3 {
            assert_eq!(g.at(i, 1), 0.0);
            assert_eq!(g.at(i, 3), 0.0);
        }
    }

    #[test]
    fn labeled_zero_target_stack() {
        let labels = LabelMap::new(2, vec![0, 1, 1]).unwrap();
        let stack = labeled_target_stack(&labels, 2, HighOrderTarget::Zero, DerivativeVariant::Forward).unwrap();
        assert_eq!(stack[0].values, gt_similarity_from_label_map(&labels).values);
        assert!(stack[1].values.data().iter().all(|&x| x == 0.0));
        assert!(stack[2].values.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn labeled_label_derivative_stack_by_hand() {
        // Δe₀ = [−1, 0], Δe₁ = [1, −1], Δe₂ = [0, 1].
        let labels = LabelMap::new(3, vec![0, 1, 2, 1]).unwrap();
        let stack = labeled_target_stack(&labels, 1, HighOrderTarget::LabelDerivative, DerivativeVariant::Forward).unwrap();
        assert_eq!(stack[0].values, gt_similarity_from_label_map(&labels).values);
        let table = [[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]];
        let l = labels.labels();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(stack[1].values.at(i, j), table[l[i]][l[j]]);
            }
        }
        assert!(labeled_target_stack(&labels, 3, HighOrderTarget::LabelDerivative, DerivativeVariant::Forward).is_err());
    }

    proptest! {
        #[test]
        fn derivative_loss_nonnegative_and_sparsity_monotone(seed in 0u64..500, q in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_features(&mut rng, 6, 4);
            let vw = random_features(&mut rng, 6, 4);
            let on = DerLossSpec { order_budget: q, ..Default::default() };
            let off = DerLossSpec { sparsity_enabled: false, ..on };
            let pred = prediction_stack(&v, q, on.variant).unwrap();
            let gt = unlabeled_target_stack(&vw, q, on.variant).unwrap();
            let with = derivative_loss(&pred, &gt, &v, &on).unwrap();
            let without = derivative_loss(&pred, &gt, &v, &off).unwrap();
            prop_assert!(without >= 0.0);
            prop_assert!(without <= with);
        }

        #[test]
        fn masked_losses_ignore_unmasked_pixels(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| softmax_columns(
                &Tensor::matrix(3, 5, (0..15).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap());
            let p = mk(&mut rng);
            let t = mk(&mut rng);
            let other = mk(&mut rng);
            let mask = [true, false, true, false, false];
            let mut mixed = p.tensor().clone();
            for j in [1, 3, 4] {
                for i in 0..3 {
                    mixed.data_mut()[i * 5 + j] = other.tensor().at(i, j);
                }
            }
            let mixed = ProbMap::new(mixed).unwrap();
            prop_assert_eq!(cross_entropy_masked(&p, t.tensor(), &mask).unwrap(),
                            cross_entropy_masked(&mixed, t.tensor(), &mask).unwrap());
            prop_assert_eq!(kl_masked(&p, t.tensor(), &mask).unwrap(),
                            kl_masked(&mixed, t.tensor(), &mask).unwrap());
        }

        #[test]
        fn derivative_loss_zero_iff_equal(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_features(&mut rng, 5, 3);
            let spec = DerLossSpec { sparsity_enabled: false, ..Default::default() };
            let pred = prediction_stack(&v, 1, spec.variant).unwrap();
            prop_assert_eq!(derivative_loss(&pred, &pred, &v, &spec).unwrap(), 0.0);
            let mut other = pred.clone();
            other[0] = similarity_matrix(&random_features(&mut rng, 5, 3));
            prop_assert!(derivative_loss(&pred, &other, &v, &spec).unwrap() > 1e-12);
        }
    }
}
