//! Distribution functions and the weighted least squares solver.

mod dist;
mod wls;

pub use dist::{
    chisq_cdf, chisq_sf, norm_cdf, norm_quantile, norm_sf, t_cdf, t_quantile, t_sf, two_sided_p,
};
pub use wls::{wls_solve, DesignMatrix, WlsSolution, RANK_TOL};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MetaError, Result};

/// A single-coefficient test: estimate, standard error, statistic and p-value.
///
/// `df = None` means the statistic is referred to the standard normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefTest {
    pub estimate: f64,
    pub se: f64,
    pub stat: f64,
    pub df: Option<f64>,
    pub p_value: f64,
}

impl CoefTest {
    /// Two-sided test of `estimate = 0`.
    pub fn two_sided(estimate: f64, se: f64, df: Option<f64>) -> Self {
        let stat = ratio(estimate, se);
        let p_value = two_sided_p(stat, df.unwrap_or(f64::INFINITY));
        Self { estimate, se, stat, df, p_value }
    }

    /// One-sided test against the alternative `estimate > 0`.
    pub fn upper(estimate: f64, se: f64, df: Option<f64>) -> Self {
        let stat = ratio(estimate, se);
        let p_value = if stat.is_nan() { f64::NAN } else { t_sf(stat, df.unwrap_or(f64::INFINITY)) };
        Self { estimate, se, stat, df, p_value }
    }

    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// `estimate / se` with the zero-variance cases resolved: 0/0 is 0 and
/// x/0 is signed infinity.
fn ratio(estimate: f64, se: f64) -> f64 {
    if se > 0.0 {
        estimate / se
    } else if estimate == 0.0 {
        0.0
    } else {
        estimate.signum() * f64::INFINITY
    }
}

/// Joint Wald test of `beta[idx] = 0` against a chi-square with `idx.len()` df.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub stat: f64,
    pub df: usize,
    pub p_value: f64,
}

pub fn wald_test(beta: &[f64], cov: &DMatrix<f64>, idx: &[usize]) -> Result<WaldTest> {
    if idx.is_empty() {
        return Err(MetaError::DimensionMismatch("Wald test needs at least one coefficient".into()));
    }
    let b = nalgebra::DVector::from_iterator(idx.len(), idx.iter().map(|&i| beta[i]));
    if b.iter().all(|v| *v == 0.0) {
        return Ok(WaldTest { stat: 0.0, df: idx.len(), p_value: 1.0 });
    }
    let v = DMatrix::from_fn(idx.len(), idx.len(), |i, j| cov[(idx[i], idx[j])]);
    let chol = v.cholesky().ok_or(MetaError::SingularCovariance)?;
    let stat = b.dot(&chol.solve(&b));
    if !stat.is_finite() {
        return Err(MetaError::SingularCovariance);
    }
    let p_value = chisq_sf(stat, idx.len() as f64)?;
    Ok(WaldTest { stat, df: idx.len(), p_value })
}

/// Weighted mean and `1 / sum(w)`. Accumulated about the first value, so a
/// constant input returns that constant exactly.
pub fn weighted_mean(y: &[f64], w: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let shift = y.first().copied().unwrap_or(0.0);
    let swy: f64 = y.iter().zip(w).map(|(a, b)| (a - shift) * b).sum();
    (shift + swy / sw, 1.0 / sw)
}

/// Unbiased sample variance (zero for fewer than two values).
pub fn sample_variance(y: &[f64]) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let m = y.iter().sum::<f64>() / n as f64;
    y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_se_ratio_conventions() {
        let t = CoefTest::two_sided(0.0, 0.0, Some(3.0));
        assert_eq!(t.stat, 0.0);
        assert_eq!(t.p_value, 1.0);
        let t = CoefTest::two_sided(1.0, 0.0, Some(3.0));
        assert!(t.stat.is_infinite());
        assert_eq!(t.p_value, 0.0);
    }

    #[test]
    fn wald_single_coefficient_is_squared_z() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.25]);
        let w = wald_test(&[1.0, 0.8], &cov, &[1]).unwrap();
        assert!((w.stat - 0.8 * 0.8 / 0.25).abs() < 1e-12);
    }
}
