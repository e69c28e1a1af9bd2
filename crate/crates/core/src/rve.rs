//! Robust variance estimation for effect sizes nested in studies.
//!
//! Coefficients are weighted least squares with approximately
//! inverse-variance working weights; their covariance is the cluster
//! sandwich built from within-study residual cross-products, valid for any
//! choice of weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::effects::{ClusteredDataset, EffectRecord, MetaDataset, Metric};
use crate::error::{MetaError, Result};
use crate::metareg::{tau2_res_mm, ModeratorSpec, VarianceMethod};
use crate::multilevel::fit_three_level;
use crate::pooling::{t_crit, Interval, IntervalMethod};
use crate::statkernel::{wls_solve, CoefTest};

pub const DEFAULT_RHO: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WorkingModel {
    /// Effects within a study share a common correlation `rho`.
    CorrelatedEffects { rho: f64 },
    /// Effects within a study vary around a study mean.
    HierarchicalEffects,
}

impl Default for WorkingModel {
    fn default() -> Self {
        WorkingModel::CorrelatedEffects { rho: DEFAULT_RHO }
    }
}

/// Per-record working weights and the variance components behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingWeights {
    pub weights: Vec<f64>,
    pub tau2: f64,
    pub omega2: Option<f64>,
}

fn check_rho(rho: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rho) {
        Ok(())
    } else {
        Err(MetaError::Domain(format!("rho = {rho} outside [0, 1]")))
    }
}

/// `1 / (k_j (mean_j S^2 + tau2))` for every record of cluster `j`.
pub fn ce_weights(data: &ClusteredDataset, tau2: f64) -> Result<Vec<f64>> {
    if !(tau2 >= 0.0) {
        return Err(MetaError::NegativeTau2(tau2));
    }
    let v = data.data().variances();
    let mut w = vec![0.0; data.k()];
    for b in data.blocks() {
        let kj = b.len() as f64;
        let mean_v = v[b.clone()].iter().sum::<f64>() / kj;
        for i in b.clone() {
            w[i] = 1.0 / (kj * (mean_v + tau2));
        }
    }
    Ok(w)
}

fn warn_unequal_variances(data: &ClusteredDataset) {
    let v = data.data().variances();
    for (b, id) in data.blocks().iter().zip(data.ids()) {
        let lo = v[b.clone()].iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v[b.clone()].iter().copied().fold(0.0, f64::max);
        if hi > 2.0 * lo {
            log::warn!("cluster {id}: sampling variances differ by more than a factor of two; weights use their mean");
        }
    }
}

/// Cluster means as a dataset of `m` records: precision-weighted mean
/// effect and moderators, variance `(1 + (k_j - 1) rho) / sum_i w_ij`.
fn collapse(data: &ClusteredDataset, mods: &ModeratorSpec, rho: f64) -> Result<MetaDataset> {
    let flat = data.data();
    let y = flat.effects();
    let w = flat.fixed_weights();
    let cols = mods.columns().iter().map(|c| flat.moderator(c)).collect::<Result<Vec<_>>>()?;
    let records = data
        .blocks()
        .iter()
        .map(|b| {
            let sw: f64 = w[b.clone()].iter().sum();
            let mean = |x: &[f64]| b.clone().map(|i| w[i] * x[i]).sum::<f64>() / sw;
            let kj = b.len() as f64;
            let var = (1.0 + (kj - 1.0) * rho) / sw;
            EffectRecord::new(mean(&y), var.sqrt()).with_moderators(cols.iter().map(|c| mean(c)).collect())
        })
        .collect();
    MetaDataset::new(records, Metric::Generic, mods.columns().to_vec(), None)
}

/// Correlated-effects weights with `tau2` from the moment estimator applied
/// to cluster means.
pub fn rve_weights_ce(data: &ClusteredDataset, mods: &ModeratorSpec, rho: f64) -> Result<WorkingWeights> {
    check_rho(rho)?;
    let c = mods.len() + 1;
    if data.m() <= c {
        return Err(MetaError::TooFewClusters { needed: c + 1, got: data.m() });
    }
    warn_unequal_variances(data);
    let tau2 = tau2_res_mm(&collapse(data, mods, rho)?, mods)?;
    Ok(WorkingWeights { weights: ce_weights(data, tau2)?, tau2, omega2: None })
}

/// `1 / (S_ij^2 + omega2 + tau2)`.
pub fn rve_weights_he(data: &ClusteredDataset, omega2: f64, tau2: f64) -> Result<Vec<f64>> {
    if !(omega2 >= 0.0) {
        return Err(MetaError::NegativeTau2(omega2));
    }
    if !(tau2 >= 0.0) {
        return Err(MetaError::NegativeTau2(tau2));
    }
    Ok(data.data().variances().iter().map(|v| 1.0 / (v + omega2 + tau2)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RveFit {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub robust_cov: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub working: Option<WorkingModel>,
    pub tau2: f64,
    pub omega2: Option<f64>,
    /// `m - p - 1`; zero leaves the fit without inference.
    pub df: usize,
    /// Residuals were inflated by `sqrt(m / (m - p - 1))`.
    pub adjusted: bool,
    pub m: usize,
    pub k: usize,
}

impl RveFit {
    pub fn se(&self, j: usize) -> f64 {
        self.robust_cov[(j, j)].max(0.0).sqrt()
    }
}

/// Fit with the weights implied by a working model.
pub fn rve_fit(data: &ClusteredDataset, mods: &ModeratorSpec, wm: WorkingModel, small_sample: bool) -> Result<RveFit> {
    let ww = match wm {
        WorkingModel::CorrelatedEffects { rho } => rve_weights_ce(data, mods, rho)?,
        WorkingModel::HierarchicalEffects => {
            warn_unequal_variances(data);
            let f = fit_three_level(data, mods, VarianceMethod::Reml)?;
            WorkingWeights { weights: rve_weights_he(data, f.omega2, f.tau2)?, tau2: f.tau2, omega2: Some(f.omega2) }
        }
    };
    let mut fit = rve_fit_weighted(data, mods, &ww.weights, small_sample)?;
    fit.working = Some(wm);
    fit.tau2 = ww.tau2;
    fit.omega2 = ww.omega2;
    Ok(fit)
}

/// Sandwich fit with caller-supplied per-record weights.
pub fn rve_fit_weighted(data: &ClusteredDataset, mods: &ModeratorSpec, weights: &[f64], small_sample: bool) -> Result<RveFit> {
    let x = mods.design(data.data())?;
    let c = x.cols();
    let m = data.m();
    if m < c || (small_sample && m <= c) {
        return Err(MetaError::TooFewClusters { needed: c + 1, got: m });
    }
    let sol = wls_solve(&x, &data.data().effects(), weights)?;
    let bread = &sol.cov_unscaled;
    let inflate = if small_sample { m as f64 / (m - c) as f64 } else { 1.0 };
    let mut meat = DMatrix::<f64>::zeros(c, c);
    for b in data.blocks() {
        // X_j' W_j e_j
        let mut u = DVector::<f64>::zeros(c);
        for i in b.clone() {
            let we = weights[i] * sol.residuals[i];
            for j in 0..c {
                u[j] += x.matrix()[(i, j)] * we;
            }
        }
        meat += &u * u.transpose();
    }
    let mut robust = bread * (meat * inflate) * bread;
    robust = (&robust + robust.transpose()) * 0.5;
    Ok(RveFit {
        names: mods.coef_names(),
        beta: sol.beta,
        robust_cov: robust,
        weights: weights.to_vec(),
        working: None,
        tau2: 0.0,
        omega2: None,
        df: m - c,
        adjusted: small_sample,
        m,
        k: data.k(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RveTest {
    pub test: CoefTest,
    pub interval: Interval,
}

/// t test with `m - p - 1` df on the robust standard error.
pub fn rve_coef_test(fit: &RveFit, coef_index: usize, level: f64) -> Result<RveTest> {
    if fit.df == 0 {
        return Err(MetaError::TooFewClusters { needed: fit.beta.len() + 1, got: fit.m });
    }
    if coef_index >= fit.beta.len() {
        return Err(MetaError::DimensionMismatch(format!("no coefficient {coef_index}")));
    }
    let df = fit.df as f64;
    let se = fit.se(coef_index);
    let b = fit.beta[coef_index];
    Ok(RveTest {
        test: CoefTest::two_sided(b, se, Some(df)),
        interval: Interval::symmetric(b, t_crit(level, df)? * se, level, IntervalMethod::Robust),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoRow {
    pub rho: f64,
    pub tau2: f64,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
}

/// One correlated-effects fit per `rho`, in grid order.
pub fn rho_sensitivity(
    data: &ClusteredDataset,
    mods: &ModeratorSpec,
    rho_grid: &[f64],
    small_sample: bool,
) -> Result<Vec<RhoRow>> {
    if rho_grid.is_empty() {
        return Err(MetaError::Domain("rho grid is empty".into()));
    }
    rho_grid
        .iter()
        .map(|&rho| {
            let f = rve_fit(data, mods, WorkingModel::CorrelatedEffects { rho }, small_sample)?;
            Ok(RhoRow { rho, tau2: f.tau2, se: (0..f.beta.len()).map(|j| f.se(j)).collect(), beta: f.beta })
        })
        .collect()
}
