//! Three-level meta-analysis: sampling error, within-study and
//! between-study heterogeneity, fitted by ML or REML.

mod likelihood;
mod optim;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::effects::ClusteredDataset;
use crate::error::{MetaError, Result};
use crate::heterogeneity::{cochran_q, typical_variance, QTest};
use crate::metareg::{lr_statistic, KhTest, LrTest, ModeratorSpec, VarianceMethod};
use crate::pooling::{t_crit, Interval, IntervalMethod};
use crate::statkernel::{sample_variance, wls_solve, CoefTest};

use likelihood::BlockModel;

/// A variance component of the three-level model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Level 2, within-study.
    Omega2,
    /// Level 3, between-study.
    Tau2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThreeLevelFit {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub omega2: f64,
    pub tau2: f64,
    pub loglik: f64,
    pub method: VarianceMethod,
    pub converged: bool,
    pub evaluations: usize,
    /// Component held at zero in a restricted fit.
    pub fixed_zero: Option<Component>,
    /// `r' V^{-1} r` at the optimum.
    pub residual_quadratic: f64,
    pub k: usize,
    pub m: usize,
}

impl ThreeLevelFit {
    pub fn se(&self, j: usize) -> f64 {
        self.cov[(j, j)].max(0.0).sqrt()
    }

    pub fn z_test(&self, j: usize) -> CoefTest {
        CoefTest::two_sided(self.beta[j], self.se(j), None)
    }

    /// Model-implied variance of each record.
    pub fn marginal_variances(&self, data: &ClusteredDataset) -> Vec<f64> {
        data.data().variances().iter().map(|v| v + self.omega2 + self.tau2).collect()
    }
}

fn likelihood_method(method: VarianceMethod) -> Result<bool> {
    match method {
        VarianceMethod::Ml => Ok(false),
        VarianceMethod::Reml => Ok(true),
        VarianceMethod::Mm => {
            Err(MetaError::UnsupportedMethod("three-level models are fitted by ml or reml".into()))
        }
    }
}

pub fn fit_three_level(data: &ClusteredDataset, mods: &ModeratorSpec, method: VarianceMethod) -> Result<ThreeLevelFit> {
    fit(data, mods, method, None)
}

/// Fit with one component held at zero, the null model of a variance test.
pub fn fit_three_level_restricted(
    data: &ClusteredDataset,
    mods: &ModeratorSpec,
    method: VarianceMethod,
    zero: Component,
) -> Result<ThreeLevelFit> {
    fit(data, mods, method, Some(zero))
}

fn fit(data: &ClusteredDataset, mods: &ModeratorSpec, method: VarianceMethod, zero: Option<Component>) -> Result<ThreeLevelFit> {
    let reml = likelihood_method(method)?;
    if data.m() < 2 {
        return Err(MetaError::TooFewClusters { needed: 2, got: data.m() });
    }
    let x = mods.design(data.data())?;
    if data.k() <= x.cols() {
        return Err(MetaError::TooFewStudies { params: x.cols(), got: data.k() });
    }
    // rank does not depend on the weights
    wls_solve(&x, &data.data().effects(), &vec![1.0; data.k()])?;

    let mut free = [zero != Some(Component::Omega2), zero != Some(Component::Tau2)];
    if free[0] && data.cluster_sizes().iter().all(|&s| s == 1) {
        log::warn!("every cluster has one effect; within-study variance is not identified and is held at zero");
        free[0] = false;
    }
    let model = BlockModel::new(data, &x, reml);
    // sorted so the bound does not depend on record order
    let mut ys = data.data().effects();
    ys.sort_by(f64::total_cmp);
    let upper = 100.0 * sample_variance(&ys);
    let opt = optim::maximize(|o, t| model.evaluate(o, t).map(|e| e.loglik), upper, free)?;
    if !opt.converged {
        log::warn!("three-level optimizer stopped after {} evaluations without meeting tolerance", opt.evaluations);
    }
    let [omega2, tau2] = opt.theta;
    let e = model.evaluate(omega2, tau2)?;
    Ok(ThreeLevelFit {
        names: mods.coef_names(),
        beta: e.beta,
        cov: e.cov,
        omega2,
        tau2,
        loglik: e.loglik,
        method,
        converged: opt.converged,
        evaluations: opt.evaluations,
        fixed_zero: zero,
        residual_quadratic: e.quad,
        k: data.k(),
        m: data.m(),
    })
}

/// Log-likelihood of the three-level model at given components.
pub fn three_level_loglik(
    data: &ClusteredDataset,
    mods: &ModeratorSpec,
    omega2: f64,
    tau2: f64,
    method: VarianceMethod,
) -> Result<f64> {
    let reml = likelihood_method(method)?;
    let x = mods.design(data.data())?;
    Ok(BlockModel::new(data, &x, reml).evaluate(omega2, tau2)?.loglik)
}

/// Likelihood-ratio test of one variance component with the boundary
/// correction: the chi-square(1) tail probability is halved.
pub fn lr_variance_test(full: &ThreeLevelFit, reduced: &ThreeLevelFit, component: Component) -> Result<LrTest> {
    if full.method != reduced.method {
        return Err(MetaError::InvalidComparison("fits use different estimation methods".into()));
    }
    if full.k != reduced.k || full.m != reduced.m {
        return Err(MetaError::InvalidComparison("fits use different data".into()));
    }
    if matches!(reduced.fixed_zero, Some(c) if c != component) {
        return Err(MetaError::InvalidComparison("reduced fit restricts a different component".into()));
    }
    if full.fixed_zero.is_some() {
        return Err(MetaError::InvalidComparison("full fit must leave both components free".into()));
    }
    let t = lr_statistic(full.loglik, reduced.loglik, 1, full.method, full.names == reduced.names)?;
    Ok(LrTest { p_value: 0.5 * t.p_value, ..t })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelDecomposition {
    pub s2_typical: f64,
    pub i2_level2: f64,
    pub i2_level3: f64,
    /// Absent when both components are zero.
    pub icc2: Option<f64>,
    pub icc3: Option<f64>,
    /// Present when a moderator-free fit is supplied.
    pub r2_level2: Option<f64>,
    pub r2_level3: Option<f64>,
}

fn explained(total: f64, residual: f64, level: &str) -> f64 {
    if !(total > 0.0) {
        return 0.0;
    }
    let r = 1.0 - residual / total;
    if r < 0.0 {
        log::warn!("{level} residual variance exceeds the moderator-free variance; R2 truncated to 0");
    }
    r.clamp(0.0, 1.0)
}

/// Level-wise I^2, intraclass correlations and explained variance.
pub fn level_decomposition(
    fit: &ThreeLevelFit,
    data: &ClusteredDataset,
    null_fit: Option<&ThreeLevelFit>,
) -> Result<LevelDecomposition> {
    if !fit.converged {
        log::warn!("level decomposition of a fit that did not converge");
    }
    let s2 = typical_variance(&data.data().fixed_weights())?;
    let total = s2 + fit.omega2 + fit.tau2;
    let het = fit.omega2 + fit.tau2;
    let (icc2, icc3) = if het > 0.0 { (Some(fit.omega2 / het), Some(fit.tau2 / het)) } else { (None, None) };
    let (r2_level2, r2_level3) = match null_fit {
        Some(n) => (Some(explained(n.omega2, fit.omega2, "level-2")), Some(explained(n.tau2, fit.tau2, "level-3"))),
        None => (None, None),
    };
    Ok(LevelDecomposition {
        s2_typical: s2,
        i2_level2: fit.omega2 / total,
        i2_level3: fit.tau2 / total,
        icc2,
        icc3,
        r2_level2,
        r2_level3,
    })
}

/// Cochran's Q over all effects, ignoring the clustering.
pub fn q_total_three_level(data: &ClusteredDataset) -> Result<QTest> {
    cochran_q(data.data())
}

/// Scaled-variance t test of a coefficient: variance times
/// `max(1, r'V^{-1}r / (k - p - 1))`, referred to t with `m - p - 1` df.
pub fn coef_test_scaled(fit: &ThreeLevelFit, coef_index: usize, level: f64) -> Result<KhTest> {
    let c = fit.beta.len();
    if fit.m <= c {
        return Err(MetaError::TooFewClusters { needed: c + 1, got: fit.m });
    }
    if coef_index >= c {
        return Err(MetaError::DimensionMismatch(format!("no coefficient {coef_index}")));
    }
    let scale = (fit.residual_quadratic / (fit.k - c) as f64).max(1.0);
    let se = (scale * fit.cov[(coef_index, coef_index)]).sqrt();
    let df = (fit.m - c) as f64;
    let test = CoefTest::two_sided(fit.beta[coef_index], se, Some(df));
    let interval = Interval::symmetric(fit.beta[coef_index], t_crit(level, df)? * se, level, IntervalMethod::HksjMod);
    Ok(KhTest { test, scale, interval })
}
