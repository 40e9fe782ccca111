//! Discrete derivatives along the channel axis of feature vectors.
//!
//! The recursive definition in [`diff`] is canonical. [`build_operator_matrix`]
//! produces the same map as an explicit banded Toeplitz matrix; the two are
//! cross-checked in tests so that index-convention slips in either show up.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeVariant {
    /// `Δv(i) = v(i+1) − v(i)`
    Forward,
    /// `Δv(i) = (v(i+2) − v(i)) / 2`
    Central,
    /// `Δv(i) = v(i+1) + v(i)`
    Summation,
    /// `Δv(i) = v(i+1) + v(i−1) − 2 v(i)`, evaluated only where both neighbours exist.
    SecondCentral,
}

impl DerivativeVariant {
    pub const ALL: [DerivativeVariant; 4] = [
        DerivativeVariant::Forward,
        DerivativeVariant::Central,
        DerivativeVariant::Summation,
        DerivativeVariant::SecondCentral,
    ];

    /// Entries lost per application.
    pub fn shrink(self) -> usize {
        match self {
            Self::Forward | Self::Summation => 1,
            Self::Central | Self::SecondCentral => 2,
        }
    }

    /// Output length after `q` applications to a `d_in`-vector.
    pub fn output_dim(self, q: usize, d_in: usize) -> Result<usize> {
        match d_in.checked_sub(q * self.shrink()) {
            Some(d) if d >= 1 => Ok(d),
            _ => Err(Error::DimensionUnderflow {
                q,
                d_in,
                variant: self,
            }),
        }
    }

    /// Largest order whose output is still non-empty.
    pub fn max_order(self, d_in: usize) -> usize {
        d_in.saturating_sub(1) / self.shrink()
    }

    /// One-step stencil as integer numerators over `2^denominator_log2`.
    fn stencil(self) -> (&'static [i64], u32) {
        match self {
            Self::Forward => (&[-1, 1], 0),
            Self::Central => (&[-1, 0, 1], 1),
            Self::Summation => (&[1, 1], 0),
            Self::SecondCentral => (&[1, -2, 1], 0),
        }
    }

    fn step(self, v: &[f64]) -> Vec<f64> {
        match self {
            Self::Forward => v.windows(2).map(|w| w[1] - w[0]).collect(),
            Self::Central => v.windows(3).map(|w| (w[2] - w[0]) / 2.0).collect(),
            Self::Summation => v.windows(2).map(|w| w[1] + w[0]).collect(),
            Self::SecondCentral => v.windows(3).map(|w| w[2] + w[0] - 2.0 * w[1]).collect(),
        }
    }
}

impl fmt::Display for DerivativeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Forward => "forward",
            Self::Central => "central",
            Self::Summation => "summation",
            Self::SecondCentral => "second_central",
        })
    }
}

impl std::str::FromStr for DerivativeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown derivative variant {s:?}")))
    }
}

/// Applies the one-step derivative `q` times. `q = 0` returns `v` unchanged.
pub fn diff(v: &[f64], q: usize, variant: DerivativeVariant) -> Result<Vec<f64>> {
    variant.output_dim(q, v.len())?;
    let mut cur = v.to_vec();
    for _ in 0..q {
        cur = variant.step(&cur);
    }
    Ok(cur)
}

/// Column-wise [`diff`] of a `[D, M]` matrix, giving `[D_q, M]`.
///
/// Works on whole rows at a time so the per-entry arithmetic matches [`diff`]
/// exactly.
pub fn diff_columns(v: &Tensor, q: usize, variant: DerivativeVariant) -> Result<Tensor> {
    let (d, m) = v.matrix_shape("diff_columns")?;
    let d_out = variant.output_dim(q, d)?;
    let mut cur = v.data().to_vec();
    let mut rows = d;
    for _ in 0..q {
        let next_rows = rows - variant.shrink();
        let mut next = vec![0.0; next_rows * m];
        for i in 0..next_rows {
            let out = &mut next[i * m..(i + 1) * m];
            let r0 = &cur[i * m..(i + 1) * m];
            let r1 = &cur[(i + 1) * m..(i + 2) * m];
            match variant {
                DerivativeVariant::Forward => {
                    for ((o, a), b) in out.iter_mut().zip(r0).zip(r1) {
                        *o = b - a;
                    }
                }
                DerivativeVariant::Summation => {
                    for ((o, a), b) in out.iter_mut().zip(r0).zip(r1) {
                        *o = b + a;
                    }
                }
                DerivativeVariant::Central => {
                    let r2 = &cur[(i + 2) * m..(i + 3) * m];
                    for ((o, a), c) in out.iter_mut().zip(r0).zip(r2) {
                        *o = (c - a) / 2.0;
                    }
                }
                DerivativeVariant::SecondCentral => {
                    let r2 = &cur[(i + 2) * m..(i + 3) * m];
                    for (((o, a), b), c) in out.iter_mut().zip(r0).zip(r1).zip(r2) {
                        *o = c + a - 2.0 * b;
                    }
                }
            }
        }
        cur = next;
        rows = next_rows;
    }
    debug_assert_eq!(rows, d_out);
    Ok(Tensor::from_parts(vec![d_out, m], cur))
}

/// Transpose of the one-step operator applied to the columns of `g`
/// (`[D_out, M]` back to `[D_out + shrink, M]`). Used for gradients.
pub(crate) fn diff_columns_adjoint(g: &Tensor, q: usize, variant: DerivativeVariant) -> Tensor {
    let m = g.cols();
    let mut cur = g.data().to_vec();
    let mut rows = g.rows();
    let (stencil, den) = variant.stencil();
    let scale = 1.0 / f64::from(1u32 << den);
    for _ in 0..q {
        let next_rows = rows + variant.shrink();
        let mut next = vec![0.0; next_rows * m];
        for i in 0..rows {
            let src = &cur[i * m..(i + 1) * m];
            for (p, &c) in stencil.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let w = c as f64 * scale;
                let dst = &mut next[(i + p) * m..(i + p + 1) * m];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        cur = next;
        rows = next_rows;
    }
    Tensor::from_parts(vec![rows, m], cur)
}

/// `q`-order derivative as an explicit `[d_out, d_in]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeOperator {
    q: usize,
    d_in: usize,
    variant: DerivativeVariant,
    matrix: Tensor,
}

impl DerivativeOperator {
    pub fn order(&self) -> usize {
        self.q
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.matrix.rows()
    }

    pub fn variant(&self) -> DerivativeVariant {
        self.variant
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

/// Row `q` of Pascal's triangle, built by additions only.
pub fn binomial_row(q: usize) -> Vec<i64> {
    let mut row = vec![1i64];
    for _ in 0..q {
        let mut next = vec![1i64; row.len() + 1];
        for p in 1..row.len() {
            next[p] = row[p - 1] + row[p];
        }
        row = next;
    }
    row
}

/// Integer band coefficients of the `q`-fold stencil and the power of two
/// dividing them. Entry `p` multiplies `v(i + p)` in output row `i`.
pub fn band_coefficients(q: usize, variant: DerivativeVariant) -> (Vec<i64>, u32) {
    if variant == DerivativeVariant::Forward {
        // (−1)^{q−p} C(q, p)
        let coeffs = binomial_row(q)
            .into_iter()
            .enumerate()
            .map(|(p, c)| if (q - p) % 2 == 0 { c } else { -c })
            .collect();
        return (coeffs, 0);
    }
    let (stencil, den) = variant.stencil();
    let mut poly = vec![1i64];
    for _ in 0..q {
        let mut next = vec![0i64; poly.len() + stencil.len() - 1];
        for (a, &x) in poly.iter().enumerate() {
            for (b, &y) in stencil.iter().enumerate() {
                next[a + b] += x * y;
            }
        }
        poly = next;
    }
    (poly, den * q as u32)
}

/// Builds the banded operator matrix for `q ≥ 1` applications of `variant`.
pub fn build_operator_matrix(q: usize, d_in: usize, variant: DerivativeVariant) -> Result<DerivativeOperator> {
    if q == 0 {
        return Err(Error::InvalidArgument(
            "operator matrices are built for order q >= 1".into(),
        ));
    }
    let d_out = variant.output_dim(q, d_in)?;
    let (coeffs, den) = band_coefficients(q, variant);
    let scale = 0.5f64.powi(den as i32);
    let mut data = vec![0.0; d_out * d_in];
    for i in 0..d_out {
        for (p, &c) in coeffs.iter().enumerate() {
            data[i * d_in + i + p] = c as f64 * scale;
        }
    }
    Ok(DerivativeOperator {
        q,
        d_in,
        variant,
        matrix: Tensor::from_parts(vec![d_out, d_in], data),
    })
}

/// `A · V`: the operator applied to every feature column.
pub fn apply_operator_columns(op: &DerivativeOperator, v: &Tensor) -> Result<Tensor> {
    let (d, _) = v.matrix_shape("apply_operator_columns")?;
    if d != op.d_in {
        return Err(Error::ShapeMismatch {
            op: "apply_operator_columns",
            expected: format!("{} feature channels", op.d_in),
            found: format!("{d}"),
        });
    }
    op.matrix.matmul(v)
}

/// Induced `1 → 1` norm: the largest column absolute sum.
pub fn induced_one_norm(a: &Tensor) -> f64 {
    let (r, c) = (a.rows(), a.cols());
    (0..c)
        .map(|j| (0..r).map(|i| a.at(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Number of singular values above `tol · σ_max`.
pub fn numerical_rank(a: &Tensor, tol: f64) -> usize {
    linalg::numerical_rank(a, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use DerivativeVariant::*;

    #[test]
    fn diff_examples() {
        assert_eq!(diff(&[1.0, 2.0, 4.0], 1, Forward).unwrap(), vec![1.0, 2.0]);
        assert_eq!(diff(&[1.0, 2.0, 4.0], 2, Forward).unwrap(), vec![1.0]);
        assert_eq!(diff(&[3.5; 3], 1, Forward).unwrap(), vec![0.0, 0.0]);
        assert_eq!(diff(&[1.0, 2.0], 0, Forward).unwrap(), vec![1.0, 2.0]);
        assert_eq!(diff(&[1.0, 2.0, 4.0], 1, Central).unwrap(), vec![1.5]);
        assert_eq!(diff(&[1.0, 2.0, 4.0], 1, Summation).unwrap(), vec![3.0, 6.0]);
        assert_eq!(diff(&[1.0, 2.0, 4.0], 1, SecondCentral).unwrap(), vec![1.0]);
    }

    #[test]
    fn diff_underflow_reports_context() {
        let err = diff(&[1.0, 2.0, 3.0], 3, Forward).unwrap_err();
        assert_eq!(
            err,
            Error::DimensionUnderflow {
                q: 3,
                d_in: 3,
                variant: Forward
            }
        );
        assert!(diff(&[1.0, 2.0, 3.0, 4.0], 2, Central).is_err());
        assert!(diff(&[1.0, 2.0, 3.0, 4.0, 5.0], 2, SecondCentral).is_ok());
    }

    #[test]
    fn forward_matrices_match_binomial_band() {
        let a1 = build_operator_matrix(1, 3, Forward).unwrap();
        assert_eq!(a1.matrix().data(), &[-1.0, 1.0, 0.0, 0.0, -1.0, 1.0]);
        let a2 = build_operator_matrix(2, 4, Forward).unwrap();
        assert_eq!(
            a2.matrix().data(),
            &[1.0, -2.0, 1.0, 0.0, 0.0, 1.0, -2.0, 1.0]
        );
        let s1 = build_operator_matrix(1, 3, Summation).unwrap();
        assert_eq!(s1.matrix().data(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_order_matrix_rejected() {
        assert!(build_operator_matrix(0, 3, Forward).is_err());
        assert!(matches!(
            build_operator_matrix(4, 4, Forward),
            Err(Error::DimensionUnderflow { .. })
        ));
    }

    #[test]
    fn forward_band_matches_repeated_convolution() {
        // Pascal-rule coefficients against generic polynomial powers of [-1, 1].
        for q in 0..12 {
            let (pascal, _) = band_coefficients(q, Forward);
            let mut poly = vec![1i64];
            for _ in 0..q {
                let mut next = vec![0i64; poly.len() + 1];
                for (a, &x) in poly.iter().enumerate() {
                    next[a] -= x;
                    next[a + 1] += x;
                }
                poly = next;
            }
            assert_eq!(pascal, poly, "q={q}");
        }
    }

    #[test]
    fn composition_in_integers() {
        for d in 3..10 {
            let a1_outer = build_operator_matrix(1, d - 1, Forward).unwrap();
            let a1 = build_operator_matrix(1, d, Forward).unwrap();
            let a2 = build_operator_matrix(2, d, Forward).unwrap();
            let prod = a1_outer.matrix().matmul(a1.matrix()).unwrap();
            assert_eq!(prod, *a2.matrix());
        }
    }

    #[test]
    fn forward_rows_sum_to_zero() {
        for q in 1..8 {
            let a = build_operator_matrix(q, 12, Forward).unwrap();
            for i in 0..a.d_out() {
                assert_eq!(a.matrix().row(i).iter().sum::<f64>(), 0.0);
            }
        }
    }

    #[test]
    fn induced_norm_examples() {
        let a1 = build_operator_matrix(1, 4, Forward).unwrap();
        assert_eq!(induced_one_norm(a1.matrix()), 2.0);
        let a3 = build_operator_matrix(3, 8, Forward).unwrap();
        assert_eq!(induced_one_norm(a3.matrix()), 8.0);
        assert_eq!(induced_one_norm(&Tensor::identity(5)), 1.0);
    }

    #[test]
    fn induced_norm_reaches_power_of_two_once_a_column_sees_the_whole_band() {
        for q in 1..=6 {
            for d in (q + 1)..=12 {
                let a = build_operator_matrix(q, d, Forward).unwrap();
                let n = induced_one_norm(a.matrix());
                let bound = (1u64 << q) as f64;
                assert!(n <= bound);
                if d > 2 * q {
                    assert_eq!(n, bound, "q={q} d={d}");
                } else {
                    // Narrow operators: no column meets every band entry.
                    assert!(n < bound, "q={q} d={d}");
                }
            }
        }
    }

    #[test]
    fn rank_examples() {
        let a1 = build_operator_matrix(1, 5, Forward).unwrap();
        assert_eq!(numerical_rank(a1.matrix(), 1e-10), 4);
        assert_eq!(numerical_rank(&Tensor::identity(6), 1e-10), 6);
        let dup = Tensor::from_rows(&[[1.0, 2.0, 3.0], [0.5, -1.0, 4.0], [1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(numerical_rank(&dup, 1e-10), 2);
    }

    #[test]
    fn forward_ranks() {
        for d in 3..=16 {
            for q in 1..d {
                let a = build_operator_matrix(q, d, Forward).unwrap();
                assert_eq!(numerical_rank(a.matrix(), 1e-10), d - q, "d={d} q={q}");
            }
        }
    }

    #[test]
    fn second_central_equals_even_forward() {
        // Restricting to interior indices turns one second-central step into Δ².
        for q in 1..4 {
            let sc = build_operator_matrix(q, 10, SecondCentral).unwrap();
            let fw = build_operator_matrix(2 * q, 10, Forward).unwrap();
            assert_eq!(sc.matrix(), fw.matrix());
        }
    }

    #[test]
    fn apply_operator_examples() {
        let constant = Tensor::from_rows(&[[0.25, 0.25], [0.25, 0.25], [0.25, 0.25], [0.25, 0.25]])
            .unwrap();
        let a1 = build_operator_matrix(1, 4, Forward).unwrap();
        let out = apply_operator_columns(&a1, &constant).unwrap();
        assert_eq!(out.dims(), &[3, 2]);
        assert!(out.data().iter().all(|&x| x == 0.0));

        // v(i) = a + b i
        let affine = Tensor::from_rows(&[[1.0, -2.0], [1.5, -1.0], [2.0, 0.0], [2.5, 1.0], [3.0, 2.0]])
            .unwrap();
        let a2 = build_operator_matrix(2, 5, Forward).unwrap();
        let out = apply_operator_columns(&a2, &affine).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));

        let bad = Tensor::zeros(vec![3, 2]);
        assert!(matches!(
            apply_operator_columns(&a2, &bad),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn apply_operator_matches_column_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let v = Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        for variant in [Forward, Summation] {
            for q in 1..=2 {
                let a = build_operator_matrix(q, 4, variant).unwrap();
                let out = apply_operator_columns(&a, &v).unwrap();
                for j in 0..3 {
                    let expect = diff(&v.column(j), q, variant).unwrap();
                    for (i, e) in expect.iter().enumerate() {
                        assert!((out.at(i, j) - e).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn adjoint_is_transpose() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for variant in DerivativeVariant::ALL {
            for q in 1..=variant.max_order(9) {
                let a = build_operator_matrix(q, 9, variant).unwrap();
                let g = Tensor::matrix(
                    a.d_out(),
                    3,
                    (0..a.d_out() * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap();
                let via_matrix = a.matrix().transpose().matmul(&g).unwrap();
                let via_stencil = diff_columns_adjoint(&g, q, variant);
                assert!(via_matrix.max_abs_diff(&via_stencil) < 1e-9, "{variant} q={q}");
            }
        }
    }

    fn variant_strategy() -> impl Strategy<Value = DerivativeVariant> {
        prop::sample::select(DerivativeVariant::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn matrix_agrees_with_recursion(
            variant in variant_strategy(),
            v in prop::collection::vec(-1.0f64..1.0, 2..14),
            q_seed in 0usize..100,
        ) {
            let max_q = variant.max_order(v.len());
            prop_assume!(max_q >= 1);
            let q = 1 + q_seed % max_q;
            let op = build_operator_matrix(q, v.len(), variant).unwrap();
            let col = Tensor::matrix(v.len(), 1, v.clone()).unwrap();
            let via_matrix = op.matrix().matmul(&col).unwrap();
            let via_recursion = diff(&v, q, variant).unwrap();
            prop_assert_eq!(via_matrix.len(), via_recursion.len());
            for (a, b) in via_matrix.data().iter().zip(&via_recursion) {
                prop_assert!((a - b).abs() <= 1e-12 * 2f64.powi(2 * q as i32));
            }
            let cols = diff_columns(&col, q, variant).unwrap();
            prop_assert_eq!(cols.data(), via_recursion.as_slice());
        }

        #[test]
        fn diff_is_linear(
            variant in variant_strategy(),
            (u, v) in (3usize..12).prop_flat_map(|n| (
                prop::collection::vec(-1.0f64..1.0, n),
                prop::collection::vec(-1.0f64..1.0, n),
            )),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let q = variant.max_order(u.len()).min(2);
            prop_assume!(q >= 1);
            let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = diff(&mix, q, variant).unwrap();
            let du = diff(&u, q, variant).unwrap();
            let dv = diff(&v, q, variant).unwrap();
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (alpha * du[i] + beta * dv[i])).abs() <= 1e-10);
            }
        }

        #[test]
        fn twice_first_order_is_second_order(v in prop::collection::vec(-1.0f64..1.0, 3..12)) {
            let once = diff(&v, 1, Forward).unwrap();
            prop_assert_eq!(diff(&once, 1, Forward).unwrap(), diff(&v, 2, Forward).unwrap());
        }

        #[test]
        fn affine_kernel_persists(a in -5i32..5, b in -5i32..5, n in 3usize..12) {
            // Integer data keeps every difference exact.
            let v: Vec<f64> = (0..n).map(|i| f64::from(a) + f64::from(b) * i as f64).collect();
            prop_assert!(diff(&v, 2, Forward).unwrap().iter().all(|&x| x == 0.0));
            for q in 2..n {
                prop_assert!(diff(&v, q, Forward).unwrap().iter().all(|&x| x == 0.0));
            }
        }
    }
}
