use std::ops::Range;

use nalgebra::{DMatrix, DVector};

/// Gaussian (restricted) log-likelihood with the covariance built densely:
/// `diag(v) + omega2 I + tau2` on every block.
pub fn dense_loglik(y: &[f64], v: &[f64], x: &DMatrix<f64>, blocks: &[Range<usize>], omega2: f64, tau2: f64, reml: bool) -> f64 {
    let k = y.len();
    let mut vm = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        vm[(i, i)] = v[i] + omega2;
    }
    for b in blocks {
        for i in b.clone() {
            for j in b.clone() {
                vm[(i, j)] += tau2;
            }
        }
    }
    let chol = vm.cholesky().unwrap();
    let log_det_v = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let vinv = chol.inverse();
    let xtv = x.transpose() * &vinv;
    let a_chol = (&xtv * x).cholesky().unwrap();
    let log_det_a = 2.0 * a_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let yv = DVector::from_column_slice(y);
    let beta = a_chol.solve(&(&xtv * &yv));
    let r = &yv - x * beta;
    let quad = (r.transpose() * &vinv * &r)[(0, 0)];
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    if reml {
        -0.5 * (log_det_v + log_det_a + quad + (k - x.ncols()) as f64 * ln2pi)
    } else {
        -0.5 * (log_det_v + quad + k as f64 * ln2pi)
    }
}

pub fn singletons(k: usize) -> Vec<Range<usize>> {
    (0..k).map(|i| i..i + 1).collect()
}

pub fn sample_variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
}
