use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::effects::ClusteredDataset;
use crate::error::{MetaError, Result};
use crate::statkernel::DesignMatrix;

struct Cluster {
    y: Vec<f64>,
    v: Vec<f64>,
    x: Vec<Vec<f64>>,
}

/// The marginal model `y_j ~ N(X_j beta, diag(v_j) + omega2 I + tau2 J)`.
///
/// Clusters are held in a canonical order so that sums, and hence the
/// optimum, do not depend on how the input orders clusters.
pub(crate) struct BlockModel {
    clusters: Vec<Cluster>,
    k: usize,
    c: usize,
    reml: bool,
}

pub(crate) struct Evaluation {
    pub loglik: f64,
    pub beta: Vec<f64>,
    /// `(X' V^{-1} X)^{-1}`.
    pub cov: DMatrix<f64>,
    /// `r' V^{-1} r` at the GLS coefficients.
    pub quad: f64,
}

fn block_cmp(a: &Cluster, b: &Cluster) -> Ordering {
    let key = |c: &Cluster| -> Vec<f64> {
        let mut k = Vec::with_capacity(3 * c.y.len() + 1);
        k.push(c.y.len() as f64);
        k.extend(c.y.iter().copied());
        k.extend(c.v.iter().copied());
        k.extend(c.x.iter().flatten().copied());
        k
    };
    let (ka, kb) = (key(a), key(b));
    for (p, q) in ka.iter().zip(&kb) {
        match p.total_cmp(q) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    ka.len().cmp(&kb.len())
}

impl BlockModel {
    pub fn new(data: &ClusteredDataset, x: &DesignMatrix, reml: bool) -> Self {
        let y = data.data().effects();
        let v = data.data().variances();
        let mut clusters: Vec<Cluster> = data
            .blocks()
            .iter()
            .map(|b| Cluster {
                y: y[b.clone()].to_vec(),
                v: v[b.clone()].to_vec(),
                x: b.clone().map(|i| x.row(i)).collect(),
            })
            .collect();
        clusters.sort_by(block_cmp);
        Self { clusters, k: data.k(), c: x.cols(), reml }
    }

    pub fn evaluate(&self, omega2: f64, tau2: f64) -> Result<Evaluation> {
        if !(omega2 >= 0.0 && tau2 >= 0.0) {
            return Err(MetaError::NegativeTau2(omega2.min(tau2)));
        }
        let c = self.c;
        let mut log_det = 0.0;
        let mut a = DMatrix::<f64>::zeros(c, c);
        let mut b = DVector::<f64>::zeros(c);
        // Per cluster: V^{-1} = D^{-1} - g D^{-1} 1 1' D^{-1}, g = tau2 / (1 + tau2 sum 1/d).
        let mut gs = Vec::with_capacity(self.clusters.len());
        for cl in &self.clusters {
            let d: Vec<f64> = cl.v.iter().map(|vi| vi + omega2).collect();
            let s1: f64 = d.iter().map(|di| 1.0 / di).sum();
            let g = tau2 / (1.0 + tau2 * s1);
            log_det += d.iter().map(|di| di.ln()).sum::<f64>() + (1.0 + tau2 * s1).ln();
            let mut sx = DVector::<f64>::zeros(c);
            let mut sy = 0.0;
            for (i, xi) in cl.x.iter().enumerate() {
                let xv = DVector::from_column_slice(xi);
                a += &xv * xv.transpose() / d[i];
                b += &xv * (cl.y[i] / d[i]);
                sx += &xv / d[i];
                sy += cl.y[i] / d[i];
            }
            a -= &sx * sx.transpose() * g;
            b -= &sx * (g * sy);
            gs.push((d, g));
        }
        let a = (&a + a.transpose()) * 0.5;
        let chol = a.cholesky().ok_or(MetaError::SingularCovariance)?;
        let beta = chol.solve(&b);
        let cov = chol.inverse();
        let mut quad = 0.0;
        for (cl, (d, g)) in self.clusters.iter().zip(&gs) {
            let mut sr = 0.0;
            for (i, xi) in cl.x.iter().enumerate() {
                let r = cl.y[i] - xi.iter().zip(beta.iter()).map(|(p, q)| p * q).sum::<f64>();
                quad += r * r / d[i];
                sr += r / d[i];
            }
            quad -= g * sr * sr;
        }
        let ln2pi = (2.0 * PI).ln();
        let mut total = log_det + quad;
        if self.reml {
            let log_det_a: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            total += log_det_a + (self.k - c) as f64 * ln2pi;
        } else {
            total += self.k as f64 * ln2pi;
        }
        Ok(Evaluation { loglik: -0.5 * total, beta: beta.iter().copied().collect(), cov, quad })
    }
}
