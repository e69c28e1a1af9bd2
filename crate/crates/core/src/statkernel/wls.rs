//! Weighted least squares through a column-pivoted Householder QR of
//! `W^{1/2} X`. The normal equations are never formed.

use nalgebra::{DMatrix, DVector};

use crate::error::{MetaError, Result};

/// Relative pivot tolerance for the rank test.
pub const RANK_TOL: f64 = 1e-12;

/// Dense regressor matrix, one row per observation.
///
/// Matrices built with [`DesignMatrix::with_intercept`] carry a leading
/// column of ones. [`DesignMatrix::general`] accepts arbitrary regressors,
/// which the transformed (no-intercept) bias regressions need.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    intercept: bool,
}

impl DesignMatrix {
    /// Intercept column followed by `columns` (each of length `rows`).
    pub fn with_intercept(rows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut values = DMatrix::from_element(rows, columns.len() + 1, 1.0);
        for (j, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(MetaError::DimensionMismatch(format!(
                    "column {} has {} entries, expected {rows}",
                    j + 1,
                    col.len()
                )));
            }
            for (i, v) in col.iter().enumerate() {
                values[(i, j + 1)] = *v;
            }
        }
        Self::checked(values, true)
    }

    pub fn intercept_only(rows: usize) -> Result<Self> {
        Self::with_intercept(rows, &[])
    }

    /// Regressors exactly as given, no intercept added.
    pub fn general(values: DMatrix<f64>) -> Result<Self> {
        Self::checked(values, false)
    }

    fn checked(values: DMatrix<f64>, intercept: bool) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(MetaError::DimensionMismatch("design matrix has no columns".into()));
        }
        if values.nrows() < values.ncols() {
            return Err(MetaError::TooFewStudies { params: values.ncols(), got: values.nrows() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MetaError::NonFiniteInput("design matrix".into()));
        }
        Ok(Self { values, intercept })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// Rows selected by `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), self.cols(), |i, j| self.values[(idx[i], j)])
    }
}

/// Output of [`wls_solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct WlsSolution {
    pub beta: Vec<f64>,
    /// `(X'WX)^{-1}`.
    pub cov_unscaled: DMatrix<f64>,
    /// Weighted residual sum of squares over `k - cols`; zero when the fit is exactly determined.
    pub mse: f64,
    /// Weighted residual sum of squares.
    pub rss: f64,
    /// Unweighted residuals `y - X beta`.
    pub residuals: Vec<f64>,
}

impl WlsSolution {
    pub fn se(&self, j: usize) -> f64 {
        self.cov_unscaled[(j, j)].max(0.0).sqrt()
    }

    /// Coefficient covariance scaled by the MSE, as in ordinary least squares.
    pub fn cov_scaled(&self) -> DMatrix<f64> {
        &self.cov_unscaled * self.mse
    }

    pub fn df_resid(&self) -> usize {
        self.residuals.len() - self.beta.len()
    }
}

/// Solves `min sum w_i (y_i - x_i' beta)^2`.
pub fn wls_solve(x: &DesignMatrix, y: &[f64], w: &[f64]) -> Result<WlsSolution> {
    let k = x.rows();
    let c = x.cols();
    if y.len() != k || w.len() != k {
        return Err(MetaError::DimensionMismatch(format!(
            "design has {k} rows, y has {}, w has {}",
            y.len(),
            w.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(MetaError::NonFiniteInput("response".into()));
    }
    if w.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(MetaError::NonFiniteInput("weights must be positive and finite".into()));
    }

    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let mut a = DMatrix::from_fn(k, c, |i, j| sw[i] * x.values[(i, j)]);
    let mut b = DVector::from_fn(k, |i, _| sw[i] * y[i]);
    let perm = householder_qr_pivoted(&mut a, &mut b)?;

    // Back substitution R z = (Q'b)[..c].
    let mut z = vec![0.0; c];
    for i in (0..c).rev() {
        let mut s = b[i];
        for j in i + 1..c {
            s -= a[(i, j)] * z[j];
        }
        z[i] = s / a[(i, i)];
    }
    let mut beta = vec![0.0; c];
    for (j, &p) in perm.iter().enumerate() {
        beta[p] = z[j];
    }

    // R^{-1}, upper triangular.
    let mut rinv = DMatrix::zeros(c, c);
    for col in 0..c {
        for i in (0..=col).rev() {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for j in i + 1..=col {
                s -= a[(i, j)] * rinv[(j, col)];
            }
            rinv[(i, col)] = s / a[(i, i)];
        }
    }
    let inner = &rinv * rinv.transpose();
    let mut cov = DMatrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            cov[(perm[i], perm[j])] = inner[(i, j)];
        }
    }
    // Exact symmetry.
    for i in 0..c {
        for j in 0..i {
            let m = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = m;
            cov[(j, i)] = m;
        }
    }

    let residuals: Vec<f64> = (0..k)
        .map(|i| y[i] - (0..c).map(|j| x.values[(i, j)] * beta[j]).sum::<f64>())
        .collect();
    let rss: f64 = residuals.iter().zip(w).map(|(r, wi)| wi * r * r).sum();
    let mse = if k > c { rss / (k - c) as f64 } else { 0.0 };
    Ok(WlsSolution { beta, cov_unscaled: cov, mse, rss, residuals })
}

/// In-place Householder QR with column pivoting. On return the upper
/// triangle of `a` holds R, `b` holds Q'b, and the returned vector maps
/// pivot position to original column.
fn householder_qr_pivoted(a: &mut DMatrix<f64>, b: &mut DVector<f64>) -> Result<Vec<usize>> {
    let (m, n) = a.shape();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut norms: Vec<f64> = (0..n).map(|j| a.column(j).norm_squared()).collect();
    let mut first_pivot = 0.0_f64;

    for k in 0..n {
        // Recompute remaining column norms exactly; columns here are few.
        for j in k..n {
            norms[j] = (k..m).map(|i| a[(i, j)] * a[(i, j)]).sum();
        }
        let (best, _) = (k..n).fold((k, -1.0), |acc, j| if norms[j] > acc.1 { (j, norms[j]) } else { acc });
        if best != k {
            a.swap_columns(k, best);
            norms.swap(k, best);
            perm.swap(k, best);
        }

        let alpha_norm = norms[k].sqrt();
        if k == 0 {
            first_pivot = alpha_norm;
            if first_pivot == 0.0 {
                return Err(MetaError::RankDeficient { column: perm[0] });
            }
        }
        if alpha_norm <= RANK_TOL * first_pivot {
            return Err(MetaError::RankDeficient { column: perm[k] });
        }

        let x0 = a[(k, k)];
        let alpha = if x0 >= 0.0 { -alpha_norm } else { alpha_norm };
        // v = x - alpha e1, stored in place below the diagonal.
        let mut v: Vec<f64> = (k..m).map(|i| a[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|t| t * t).sum();
        if vnorm2 > 0.0 {
            for j in k..n {
                let dot: f64 = (k..m).map(|i| v[i - k] * a[(i, j)]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in k..m {
                    a[(i, j)] -= f * v[i - k];
                }
            }
            let dot: f64 = (k..m).map(|i| v[i - k] * b[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                b[i] -= f * v[i - k];
            }
        }
        a[(k, k)] = alpha;
        for i in k + 1..m {
            a[(i, k)] = 0.0;
        }
    }
    Ok(perm)
}
