//! Central finite-difference validation of analytic gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against `(f(x + ε e_i) − f(x − ε e_i)) / 2ε` for every coordinate.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64, analytic: &Tensor) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if x.dims() != analytic.dims() {
        return Err(Error::ShapeMismatch {
            op: "finite_difference_check",
            expected: format!("{:?}", x.dims()),
            found: format!("{:?}", analytic.dims()),
        });
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() {
            return Err(Error::NonFiniteDifference { coordinate: i, sign: '+' });
        }
        if !minus.is_finite() {
            return Err(Error::NonFiniteDifference { coordinate: i, sign: '-' });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || i == 0 {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::entrywise_l1;

    fn sample() -> Tensor {
        Tensor::from_rows(&[[0.7, -1.3, 2.1], [-0.4, 0.9, -2.6]]).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let x = sample();
        let r = finite_difference_check(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5, &x.scale(2.0))
            .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn l1_away_from_kinks() {
        let x = sample();
        let signs = x.map(f64::signum);
        let r = finite_difference_check(|t| Ok(entrywise_l1(t)), &x, 1e-5, &signs).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn planted_fault_is_reported() {
        let x = sample();
        let r = finite_difference_check(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5, &x.scale(4.0))
            .unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_objective_names_coordinate() {
        let x = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let err = finite_difference_check(
            |t| Ok(if t.data()[1] > 0.0 { f64::INFINITY } else { 0.0 }),
            &x,
            1e-5,
            &Tensor::zeros(vec![1, 2]),
        )
        .unwrap_err();
        assert_eq!(err, Error::NonFiniteDifference { coordinate: 1, sign: '+' });
    }

    #[test]
    fn bad_eps_rejected() {
        let x = sample();
        assert!(finite_difference_check(|_| Ok(0.0), &x, 0.0, &x).is_err());
    }
}
