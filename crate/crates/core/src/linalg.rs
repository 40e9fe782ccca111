//! Small dense linear-algebra helpers backed by `nalgebra`'s SVD.

use nalgebra::DMatrix;

use crate::tensor::Tensor;

pub(crate) fn to_dmatrix(a: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.data())
}

/// Singular values in descending order.
pub fn singular_values(a: &Tensor) -> Vec<f64> {
    let mut s: Vec<f64> = to_dmatrix(a).singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Count of singular values strictly above `tol · σ_max`. The zero matrix has rank 0.
pub fn numerical_rank(a: &Tensor, tol: f64) -> usize {
    let s = singular_values(a);
    let Some(&max) = s.first() else { return 0 };
    if max == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > tol * max).count()
}

/// `σ_max / σ_min` over all `min(rows, cols)` singular values; infinite when singular.
pub fn condition_number(a: &Tensor) -> f64 {
    let s = singular_values(a);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Minimum-norm least-squares solution of `a x = b`, discarding singular
/// values below `tol · σ_max`.
pub fn pseudo_solve(a: &Tensor, b: &[f64], tol: f64) -> Vec<f64> {
    let m = to_dmatrix(a);
    let rhs = nalgebra::DVector::from_column_slice(b);
    let svd = m.svd(true, true);
    let max = svd.singular_values.max();
    let eps = if max > 0.0 { tol * max } else { 0.0 };
    // `solve` zeroes singular values at or below eps.
    match svd.solve(&rhs, eps) {
        Ok(x) => x.iter().copied().collect(),
        Err(_) => vec![0.0; a.cols()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_of_zero_matrix() {
        assert_eq!(numerical_rank(&Tensor::zeros(vec![3, 3]), 1e-10), 0);
    }

    #[test]
    fn solve_square_system() {
        let a = Tensor::from_rows(&[[2.0, 1.0], [1.0, 3.0]]).unwrap();
        let x = pseudo_solve(&a, &[3.0, 5.0], 1e-12);
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
        assert!((condition_number(&a) - 2.618033988749895).abs() < 1e-9);
    }

    #[test]
    fn min_norm_on_rank_deficient() {
        let a = Tensor::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let x = pseudo_solve(&a, &[2.0, 2.0], 1e-12);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
        assert!(condition_number(&a).is_infinite() || condition_number(&a) > 1e15);
    }
}
