//! Dense row-major `f64` tensors and the typed per-pixel maps built on them.
//!
//! Every map in this crate is a matrix whose columns are pixels: features are
//! `[D, M]`, logits and probabilities `[C, M]`, similarities `[M, M]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns whose L1 norm falls below this are treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Tolerance on column sums accepted by [`ProbMap::new`].
pub const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting element-count mismatches and non-finite data.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if dims.is_empty() || dims.contains(&0) || expected != data.len() {
            return Err(Error::ElementCount {
                op: "Tensor::new",
                dims,
                expected,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: "Tensor::new",
                index,
            });
        }
        Ok(Self { dims, data })
    }

    /// Internal constructor for results of arithmetic on finite tensors.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self::from_parts(dims, vec![0.0; n])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from row slices; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "Tensor::from_rows",
                    expected: format!("{cols} columns"),
                    found: format!("{} columns in row {i}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor, or a shape error naming `op`.
    pub fn matrix_shape(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::ShapeMismatch {
                op,
                expected: "2-D tensor".into(),
                found: format!("dims {other:?}"),
            }),
        }
    }

    /// Row count; panics on tensors that are not 2-D.
    pub fn rows(&self) -> usize {
        assert_eq!(self.dims.len(), 2, "rows() on a {}-D tensor", self.dims.len());
        self.dims[0]
    }

    /// Column count; panics on tensors that are not 2-D.
    pub fn cols(&self) -> usize {
        assert_eq!(self.dims.len(), 2, "cols() on a {}-D tensor", self.dims.len());
        self.dims[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        let (rows, cols) = (self.rows(), self.cols());
        (0..rows).map(|r| self.data[r * cols + c]).collect()
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_parts(vec![c, r], out)
    }

    /// Plain matrix product, accumulating over the inner index in order.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (n, k) = self.matrix_shape("matmul")?;
        let (k2, m) = rhs.matrix_shape("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: format!("rhs with {k} rows"),
                found: format!("{k2} rows"),
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let acc = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b = &rhs.data[p * m..(p + 1) * m];
                for (o, &bv) in acc.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    fn zip_with(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != rhs.dims {
            return Err(Error::ShapeMismatch {
                op,
                expected: format!("{:?}", self.dims),
                found: format!("{:?}", rhs.dims),
            });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.dims.clone(), data))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|x| alpha * x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Tensor> {
        Self::new(dims, self.data)
    }

    pub fn max_abs_diff(&self, rhs: &Tensor) -> f64 {
        assert_eq!(self.dims, rhs.dims);
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// What [`l1_normalize_columns`] does with a column whose L1 norm is (numerically) zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroPolicy {
    Error,
    /// Replace the column with the constant `1/D`.
    UniformFallback,
}

/// Scales every column to unit L1 norm, preserving signs.
pub fn l1_normalize_columns(t: &Tensor, policy: ZeroPolicy) -> Result<Tensor> {
    let (d, m) = t.matrix_shape("l1_normalize_columns")?;
    let mut norms = vec![0.0; m];
    for i in 0..d {
        for (n, x) in norms.iter_mut().zip(t.row(i)) {
            *n += x.abs();
        }
    }
    for (column, &n) in norms.iter().enumerate() {
        if n < DEGENERATE_NORM && policy == ZeroPolicy::Error {
            return Err(Error::DegenerateColumn { column });
        }
    }
    let mut out = t.clone();
    let uniform = 1.0 / d as f64;
    for i in 0..d {
        let row = &mut out.data_mut()[i * m..(i + 1) * m];
        for (x, &n) in row.iter_mut().zip(&norms) {
            *x = if n < DEGENERATE_NORM { uniform } else { *x / n };
        }
    }
    Ok(out)
}

/// Sum of absolute values of all entries (the matrix "L1 norm" used by the losses).
pub fn entrywise_l1(t: &Tensor) -> f64 {
    t.data().iter().map(|x| x.abs()).sum()
}

/// Class logits `[C, M]`.
pub type LogitMap = Tensor;

/// Column-stochastic class probabilities `[C, M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(Tensor);

impl ProbMap {
    /// Validates entries in `[0, 1]` and column sums within [`PROB_SUM_TOL`] of one.
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, m) = t.matrix_shape("ProbMap::new")?;
        for j in 0..m {
            let mut s = 0.0;
            for i in 0..c {
                let p = t.at(i, j);
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidArgument(format!(
                        "probability {p} out of range at class {i}, pixel {j}"
                    )));
                }
                s += p;
            }
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::InvalidArgument(format!(
                    "probability column {j} sums to {s}"
                )));
            }
        }
        Ok(Self(t))
    }

    pub(crate) fn new_unchecked(t: Tensor) -> Self {
        Self(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn classes(&self) -> usize {
        self.0.rows()
    }

    pub fn pixels(&self) -> usize {
        self.0.cols()
    }

    pub fn argmax(&self) -> Vec<usize> {
        argmax_columns(&self.0)
    }
}

/// Per-column index of the largest entry (first one on ties).
pub fn argmax_columns(t: &Tensor) -> Vec<usize> {
    let (c, m) = (t.rows(), t.cols());
    (0..m)
        .map(|j| {
            let mut best = 0;
            for i in 1..c {
                if t.at(i, j) > t.at(best, j) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Column-wise softmax over classes, stabilized by subtracting each column's max.
pub fn softmax_columns(l: &LogitMap) -> ProbMap {
    let (c, m) = (l.rows(), l.cols());
    let mut out = vec![0.0; c * m];
    for j in 0..m {
        let mut mx = f64::NEG_INFINITY;
        for i in 0..c {
            mx = mx.max(l.at(i, j));
        }
        let mut z = 0.0;
        for i in 0..c {
            let e = (l.at(i, j) - mx).exp();
            out[i * m + j] = e;
            z += e;
        }
        for i in 0..c {
            out[i * m + j] /= z;
        }
    }
    ProbMap(Tensor::from_parts(vec![c, m], out))
}

/// Per-pixel class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    classes: usize,
    labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(classes: usize, labels: Vec<usize>) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside 0..{classes}"
            )));
        }
        Ok(Self { classes, labels })
    }

    /// Reads class indices back from a one-hot `[C, M]` matrix.
    pub fn from_one_hot(y: &Tensor) -> Result<Self> {
        let (c, m) = y.matrix_shape("LabelMap::from_one_hot")?;
        let mut labels = Vec::with_capacity(m);
        for j in 0..m {
            let mut hot = None;
            for i in 0..c {
                match y.at(i, j) {
                    v if v == 1.0 && hot.is_none() => hot = Some(i),
                    v if v == 0.0 => {}
                    _ => return Err(Error::NotOneHot { column: j }),
                }
            }
            labels.push(hot.ok_or(Error::NotOneHot { column: j })?);
        }
        Ok(Self { classes: c, labels })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn one_hot(&self) -> Tensor {
        let m = self.labels.len();
        let mut t = Tensor::zeros(vec![self.classes, m]);
        for (j, &l) in self.labels.iter().enumerate() {
            t.data_mut()[l * m + j] = 1.0;
        }
        t
    }
}

/// Per-pixel `D`-dimensional features `[D, M]` with L1-normalized columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn from_raw(raw: &Tensor, policy: ZeroPolicy) -> Result<Self> {
        l1_normalize_columns(raw, policy).map(Self)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn pixels(&self) -> usize {
        self.0.cols()
    }
}

impl AsRef<Tensor> for FeatureMap {
    fn as_ref(&self) -> &Tensor {
        &self.0
    }
}
