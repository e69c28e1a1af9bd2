use std::f64::consts::PI;

use crate::error::{MetaError, Result};
use crate::statkernel::{wls_solve, DesignMatrix};

/// Marginal log-likelihood of `y ~ N(X beta, diag(v) + tau2 I)` with `beta`
/// profiled out by GLS. `reml = true` gives the restricted likelihood.
pub fn log_likelihood(x: &DesignMatrix, y: &[f64], v: &[f64], tau2: f64, reml: bool) -> Result<f64> {
    if !(tau2 >= 0.0) {
        return Err(MetaError::NegativeTau2(tau2));
    }
    let w: Vec<f64> = v.iter().map(|vi| 1.0 / (vi + tau2)).collect();
    let sol = wls_solve(x, y, &w)?;
    let k = y.len() as f64;
    let log_det_v: f64 = v.iter().map(|vi| (vi + tau2).ln()).sum();
    let mut ll = log_det_v + sol.rss;
    if reml {
        let chol = sol.cov_unscaled.clone().cholesky().ok_or(MetaError::SingularCovariance)?;
        let log_det_cov: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        ll += -log_det_cov + (k - x.cols() as f64) * (2.0 * PI).ln();
    } else {
        ll += k * (2.0 * PI).ln();
    }
    Ok(-0.5 * ll)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Maximum {
    pub arg: f64,
    pub value: f64,
    pub iterations: usize,
}

const PRESCAN: usize = 64;
const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Maximizes `f` on `[lo, hi]`: a coarse scan (denser near `lo`) locates
/// the best cell, then golden-section search refines it until the bracket is
/// narrower than `tol * (1 + |x|)`.
pub fn maximize_bounded<F>(f: F, lo: f64, hi: f64, tol: f64, max_iter: usize) -> Result<Maximum>
where
    F: Fn(f64) -> Result<f64>,
{
    if !(hi > lo) {
        return Err(MetaError::Domain(format!("empty search interval [{lo}, {hi}]")));
    }
    let grid: Vec<f64> = (0..=PRESCAN)
        .map(|i| {
            let u = i as f64 / PRESCAN as f64;
            lo + (hi - lo) * u * u
        })
        .collect();
    let mut vals = Vec::with_capacity(grid.len());
    for &g in &grid {
        vals.push(f(g)?);
    }
    let best = vals
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .ok_or(MetaError::NonConvergence { evaluations: grid.len() })?;

    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(PRESCAN)];
    let inner = golden_section(&f, a, b, tol, max_iter)
        .map_err(|_| MetaError::NonConvergence { evaluations: grid.len() + max_iter + 2 })?;
    let (mut arg, mut value) = (inner.arg, inner.value);
    let iterations = inner.iterations;
    // The boundary is a candidate in its own right.
    for (g, v) in [(grid[0], vals[0]), (grid[PRESCAN], vals[PRESCAN])] {
        if v > value {
            arg = g;
            value = v;
        }
    }
    Ok(Maximum { arg, value, iterations })
}

/// Golden-section search for a maximum of `f` on `[a, b]`, stopping when
/// the bracket is narrower than `tol * (1 + |x|)`.
pub fn golden_section<F>(f: F, mut a: f64, mut b: f64, tol: f64, max_iter: usize) -> Result<Maximum>
where
    F: Fn(f64) -> Result<f64>,
{
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    let mut iterations = 0;
    while (b - a) > tol * (1.0 + 0.5 * (a + b).abs()) {
        if iterations >= max_iter {
            return Err(MetaError::NonConvergence { evaluations: iterations + 2 });
        }
        iterations += 1;
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d)?;
        }
    }
    let (arg, value) = if fc >= fd { (c, fc) } else { (d, fd) };
    Ok(Maximum { arg, value, iterations })
}
