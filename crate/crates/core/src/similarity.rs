//! Pixel similarity matrices, label propagation and pseudo-label blending.
//!
//! Similarities are dense `M × M`; at desk scale (`M ≤ 1024`) a Gram product
//! costs `O(M² D)`. Propagation through `S + Δ¹S` never materializes the
//! matrix: `L (VᵀV) = (L Vᵀ) V` costs `O(C D M)`.

use serde::{Deserialize, Serialize};

use crate::derivative::{diff, diff_columns, DerivativeVariant};
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, LogitMap, ProbMap, Tensor};

/// Default confidence threshold for pseudo-label masks.
pub const DEFAULT_TAU: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    Predicted,
    GtFromLabels,
    GtFromWeakFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    pub kind: SimilarityKind,
}

impl SimilarityMatrix {
    pub fn pixels(&self) -> usize {
        self.values.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineConvention {
    /// `uᵀv / (‖u‖₂ ‖v‖₂)`
    L2,
    /// `uᵀv / (‖u‖₁ ‖v‖₁)`, which is the plain dot product on L1-normalized inputs.
    L1Dot,
}

pub fn cosine(u: &[f64], v: &[f64], convention: CosineConvention) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine",
            expected: format!("length {}", u.len()),
            found: format!("length {}", v.len()),
        });
    }
    let norm = |x: &[f64]| match convention {
        CosineConvention::L2 => x.iter().map(|a| a * a).sum::<f64>().sqrt(),
        CosineConvention::L1Dot => x.iter().map(|a| a.abs()).sum::<f64>(),
    };
    let (nu, nv) = (norm(u), norm(v));
    if nu <= 1e-12 {
        return Err(Error::ZeroVector { argument: "first" });
    }
    if nv <= 1e-12 {
        return Err(Error::ZeroVector { argument: "second" });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(match convention {
        CosineConvention::L2 => (dot / (nu * nv)).clamp(-1.0, 1.0),
        CosineConvention::L1Dot => dot / (nu * nv),
    })
}

/// `VᵀV` for a `[D, M]` matrix. The upper triangle is accumulated over
/// channels in order and mirrored, so the result is exactly symmetric.
pub fn gram(v: &Tensor) -> Tensor {
    let (d, m) = (v.rows(), v.cols());
    let mut s = vec![0.0; m * m];
    for k in 0..d {
        let row = v.row(k);
        for i in 0..m {
            let a = row[i];
            if a == 0.0 {
                continue;
            }
            let out = &mut s[i * m + i..(i + 1) * m];
            for (o, &b) in out.iter_mut().zip(&row[i..]) {
                *o += a * b;
            }
        }
    }
    for i in 0..m {
        for j in 0..i {
            s[i * m + j] = s[j * m + i];
        }
    }
    Tensor::from_parts(vec![m, m], s)
}

/// `S = VᵀV` over L1-normalized feature columns.
pub fn similarity_matrix(v: &Tensor) -> SimilarityMatrix {
    SimilarityMatrix {
        values: gram(v),
        kind: SimilarityKind::Predicted,
    }
}

/// `Δ^q S = (Δ^q V)ᵀ (Δ^q V)`; `q = 0` gives [`similarity_matrix`].
pub fn derivative_similarity(v: &Tensor, q: usize, variant: DerivativeVariant) -> Result<SimilarityMatrix> {
    let dv = diff_columns(v, q, variant)?;
    Ok(SimilarityMatrix {
        values: gram(&dv),
        kind: SimilarityKind::Predicted,
    })
}

/// Similarity targets computed from (non-differentiated) weak-branch features.
pub fn gt_similarity_from_features(v_weak: &Tensor, q: usize, variant: DerivativeVariant) -> Result<SimilarityMatrix> {
    let mut s = derivative_similarity(v_weak, q, variant)?;
    s.kind = SimilarityKind::GtFromWeakFeatures;
    Ok(s)
}

/// `S^GT = YᵀY` for a one-hot `[C, M]` label matrix.
pub fn gt_similarity_from_labels(y: &Tensor) -> Result<SimilarityMatrix> {
    let labels = LabelMap::from_one_hot(y)?;
    Ok(gt_similarity_from_label_map(&labels))
}

pub fn gt_similarity_from_label_map(labels: &LabelMap) -> SimilarityMatrix {
    let l = labels.labels();
    let m = l.len();
    let mut s = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            if l[i] == l[j] {
                s[i * m + j] = 1.0;
            }
        }
    }
    SimilarityMatrix {
        values: Tensor::from_parts(vec![m, m], s),
        kind: SimilarityKind::GtFromLabels,
    }
}

/// Label propagation `L̃ = L S`.
pub fn propagate(l: &LogitMap, s: &SimilarityMatrix) -> Result<LogitMap> {
    let (_, m) = l.matrix_shape("propagate")?;
    if s.pixels() != m {
        return Err(Error::ShapeMismatch {
            op: "propagate",
            expected: format!("{m}x{m} similarity"),
            found: format!("{:?}", s.values.dims()),
        });
    }
    l.matmul(&s.values)
}

/// `X Vᵀ V` without forming `VᵀV`.
fn times_gram(x: &Tensor, v: &Tensor) -> Tensor {
    let xv = x.matmul(&v.transpose()).expect("shapes checked by caller");
    xv.matmul(v).expect("shapes checked by caller")
}

/// Derivative label propagation `L̃ = L (S + Δ¹S)` with `S = VᵀV`.
pub fn derivative_propagate(l: &LogitMap, v: &Tensor) -> Result<LogitMap> {
    derivative_propagate_with(l, v, DerivativeVariant::Forward)
}

/// [`derivative_propagate`] with a configurable derivative variant.
pub fn derivative_propagate_with(l: &LogitMap, v: &Tensor, variant: DerivativeVariant) -> Result<LogitMap> {
    let (_, m) = l.matrix_shape("derivative_propagate")?;
    let (d, mv) = v.matrix_shape("derivative_propagate")?;
    if m != mv {
        return Err(Error::ShapeMismatch {
            op: "derivative_propagate",
            expected: format!("features with {m} pixels"),
            found: format!("{mv} pixels"),
        });
    }
    if d < 2 {
        return Err(Error::DimensionUnderflow { q: 1, d_in: d, variant });
    }
    let dv = diff_columns(v, 1, variant)?;
    times_gram(l, v).add(&times_gram(l, &dv))
}

/// Positive factor on `S + Δ¹S` for a `D × M` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelScale {
    /// Factor 1: the kernel as is.
    Unit,
    /// Factor `D / M`. For clustered L1-normalized features a column of
    /// `S + Δ¹S` then sums to roughly the cluster's share of pixels.
    DimOverPixels,
}

impl KernelScale {
    pub fn factor(self, dim: usize, pixels: usize) -> f64 {
        match self {
            KernelScale::Unit => 1.0,
            KernelScale::DimOverPixels => dim as f64 / pixels as f64,
        }
    }
}

/// `L · k(S + Δ¹S)` with `k` from `scale`; [`KernelScale::Unit`] returns
/// [`derivative_propagate_with`] unchanged.
pub fn scaled_propagate(l: &LogitMap, v: &Tensor, variant: DerivativeVariant, scale: KernelScale) -> Result<LogitMap> {
    let out = derivative_propagate_with(l, v, variant)?;
    let k = scale.factor(v.rows(), v.cols());
    Ok(if k == 1.0 { out } else { out.scale(k) })
}

/// The explicit `S + Δ¹S` kernel that [`derivative_propagate`] multiplies by.
pub fn rectification_kernel(v: &Tensor, variant: DerivativeVariant) -> Result<SimilarityMatrix> {
    let s = gram(v);
    let ds = derivative_similarity(v, 1, variant)?;
    Ok(SimilarityMatrix {
        values: s.add(&ds.values)?,
        kind: SimilarityKind::Predicted,
    })
}

/// Current epoch and total epochs; the blend weight is `ep / total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlendSchedule {
    pub ep: usize,
    pub total: usize,
}

impl BlendSchedule {
    pub fn new(ep: usize, total: usize) -> Result<Self> {
        if total == 0 || ep > total {
            return Err(Error::InvalidArgument(format!(
                "blend schedule needs 0 <= ep <= total, total >= 1 (got ep={ep}, total={total})"
            )));
        }
        Ok(Self { ep, total })
    }

    pub fn eta(&self) -> f64 {
        self.ep as f64 / self.total as f64
    }
}

/// `P̄ = (1 − η) P^w + η P̃^w`. The endpoints return the corresponding input unchanged.
pub fn blend_pseudo_labels(pw: &ProbMap, pt: &ProbMap, sched: BlendSchedule) -> Result<ProbMap> {
    if pw.tensor().dims() != pt.tensor().dims() {
        return Err(Error::ShapeMismatch {
            op: "blend_pseudo_labels",
            expected: format!("{:?}", pw.tensor().dims()),
            found: format!("{:?}", pt.tensor().dims()),
        });
    }
    if sched.ep == 0 {
        return Ok(pw.clone());
    }
    if sched.ep == sched.total {
        return Ok(pt.clone());
    }
    let eta = sched.eta();
    let blended = pw
        .tensor()
        .data()
        .iter()
        .zip(pt.tensor().data())
        .map(|(&a, &b)| (1.0 - eta) * a + eta * b)
        .collect();
    Ok(ProbMap::new_unchecked(Tensor::from_parts(
        pw.tensor().dims().to_vec(),
        blended,
    )))
}

/// `mask[i]` is set iff the pixel's top class probability reaches `tau`.
pub fn confidence_mask(p: &ProbMap, tau: f64) -> Vec<bool> {
    let t = p.tensor();
    (0..t.cols())
        .map(|j| (0..t.rows()).map(|i| t.at(i, j)).fold(f64::NEG_INFINITY, f64::max) >= tau)
        .collect()
}

/// `(Δ^q u)ᵀ (Δ^q v)`, the linearized derivative similarity of two vectors.
pub fn derivative_dot(u: &[f64], v: &[f64], q: usize, variant: DerivativeVariant) -> Result<f64> {
    let du = diff(u, q, variant)?;
    let dv = diff(v, q, variant)?;
    Ok(du.iter().zip(&dv).map(|(a, b)| a * b).sum())
}
