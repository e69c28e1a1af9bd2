//! Fixed and mixed-effects meta-regression.
//!
//! The residual between-study variance is estimated by the moment estimator
//! `(Q_res - (k - p - 1)) / tr(M)` or by maximizing the ML / REML marginal
//! likelihood of `y ~ N(X beta, diag(S_i^2) + tau2 I)`.

mod likelihood;

pub use likelihood::{golden_section, log_likelihood, maximize_bounded, Maximum};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::effects::MetaDataset;
use crate::error::{MetaError, Result};
use crate::heterogeneity::{typical_variance, QTest};
use crate::pooling::{t_crit, z_crit, Interval, IntervalMethod};
use crate::statkernel::{chisq_sf, sample_variance, wald_test, wls_solve, CoefTest, DesignMatrix, WaldTest};

/// Moderator columns of a regression; the intercept is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModeratorSpec {
    columns: Vec<String>,
}

impl ModeratorSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new<S: AsRef<str>>(columns: &[S]) -> Result<Self> {
        let columns: Vec<String> = columns.iter().map(|c| c.as_ref().to_string()).collect();
        for (i, c) in columns.iter().enumerate() {
            if columns[..i].contains(c) {
                return Err(MetaError::Domain(format!("moderator '{c}' listed twice")));
            }
        }
        Ok(Self { columns })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    /// Number of slopes `p`.
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Coefficient names, intercept first.
    pub fn coef_names(&self) -> Vec<String> {
        std::iter::once("intercept".to_string()).chain(self.columns.iter().cloned()).collect()
    }

    pub fn design(&self, data: &MetaDataset) -> Result<DesignMatrix> {
        let cols = self.columns.iter().map(|c| data.moderator(c)).collect::<Result<Vec<_>>>()?;
        if data.k() < cols.len() + 1 {
            return Err(MetaError::TooFewStudies { params: cols.len() + 1, got: data.k() });
        }
        DesignMatrix::with_intercept(data.k(), &cols)
    }
}

/// Estimator of the residual between-study variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    Mm,
    Ml,
    Reml,
}

impl std::str::FromStr for VarianceMethod {
    type Err = MetaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mm" | "dl" => Ok(VarianceMethod::Mm),
            "ml" => Ok(VarianceMethod::Ml),
            "reml" => Ok(VarianceMethod::Reml),
            "eb" => Err(MetaError::UnsupportedMethod(
                "empirical Bayes variance estimation is not implemented; use mm, ml or reml".into(),
            )),
            other => Err(MetaError::UnsupportedMethod(format!("unknown variance method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegModel {
    Fixed,
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    /// `(X'WX)^{-1}` for the weights of this fit.
    pub cov: DMatrix<f64>,
    pub model: RegModel,
    pub method: Option<VarianceMethod>,
    pub tau2_res: f64,
    /// Residual heterogeneity statistic from the fixed-effects fit.
    pub q_res: f64,
    pub df_res: usize,
    pub i2_res: f64,
    pub loglik: Option<f64>,
    pub weights: Vec<f64>,
    /// `y - X beta` for this fit's coefficients.
    pub residuals: Vec<f64>,
    pub k: usize,
}

impl RegressionFit {
    pub fn se(&self, j: usize) -> f64 {
        self.cov[(j, j)].max(0.0).sqrt()
    }

    /// Number of slopes.
    pub fn p(&self) -> usize {
        self.beta.len() - 1
    }

    /// Wald z test of coefficient `j`.
    pub fn z_test(&self, j: usize) -> CoefTest {
        CoefTest::two_sided(self.beta[j], self.se(j), None)
    }

    pub fn z_interval(&self, j: usize, level: f64) -> Result<Interval> {
        Ok(Interval::symmetric(self.beta[j], z_crit(level)? * self.se(j), level, IntervalMethod::WaldZ))
    }
}

fn need_residual_df(data: &MetaDataset, mods: &ModeratorSpec) -> Result<()> {
    let c = mods.len() + 1;
    if data.k() <= c {
        Err(MetaError::TooFewStudies { params: c, got: data.k() })
    } else {
        Ok(())
    }
}

fn i2_from_q(q: f64, df: usize) -> f64 {
    if q > 0.0 {
        ((q - df as f64) / q).max(0.0)
    } else {
        0.0
    }
}

/// Inverse-variance weighted regression. Exactly determined fits
/// (`k = p + 1`) are allowed and have zero residual df.
pub fn fit_fixed(data: &MetaDataset, mods: &ModeratorSpec) -> Result<RegressionFit> {
    let x = mods.design(data)?;
    let y = data.effects();
    let w = data.fixed_weights();
    let sol = wls_solve(&x, &y, &w)?;
    let df_res = data.k() - x.cols();
    let q_res = sol.rss;
    Ok(RegressionFit {
        names: mods.coef_names(),
        beta: sol.beta,
        cov: sol.cov_unscaled,
        model: RegModel::Fixed,
        method: None,
        tau2_res: 0.0,
        q_res,
        df_res,
        i2_res: i2_from_q(q_res, df_res),
        loglik: None,
        weights: w,
        residuals: sol.residuals,
        k: data.k(),
    })
}

/// Residual heterogeneity test `Q_res ~ chi2(k - p - 1)`.
pub fn q_res_test(data: &MetaDataset, mods: &ModeratorSpec) -> Result<QTest> {
    need_residual_df(data, mods)?;
    let fit = fit_fixed(data, mods)?;
    Ok(QTest { q: fit.q_res, df: fit.df_res, p_value: chisq_sf(fit.q_res, fit.df_res as f64)? })
}

/// `tr(W - W X (X'WX)^{-1} X'W)` for diagonal `W`.
fn trace_m(x: &DesignMatrix, w: &[f64], cov_unscaled: &DMatrix<f64>) -> f64 {
    let sw: f64 = w.iter().sum();
    // tr(W X C X' W) = sum_i w_i^2 x_i' C x_i
    let mut t = 0.0;
    for (i, wi) in w.iter().enumerate() {
        let xi = x.row(i);
        let mut quad = 0.0;
        for a in 0..xi.len() {
            for b in 0..xi.len() {
                quad += xi[a] * cov_unscaled[(a, b)] * xi[b];
            }
        }
        t += wi * wi * quad;
    }
    sw - t
}

/// Moment estimator of the residual between-study variance, truncated at zero.
pub fn tau2_res_mm(data: &MetaDataset, mods: &ModeratorSpec) -> Result<f64> {
    need_residual_df(data, mods)?;
    let x = mods.design(data)?;
    let w = data.fixed_weights();
    let sol = wls_solve(&x, &data.effects(), &w)?;
    let tr = trace_m(&x, &w, &sol.cov_unscaled);
    if !(tr > 0.0) {
        return Err(MetaError::DegenerateWeights(format!("tr(M) = {tr}")));
    }
    Ok(((sol.rss - sol.df_resid() as f64) / tr).max(0.0))
}

/// Golden-section settings for the ML / REML estimators.
pub const LIKELIHOOD_TOL: f64 = 1e-10;
pub const LIKELIHOOD_MAX_ITER: usize = 500;

/// Mixed-effects meta-regression with weights `1 / (S_i^2 + tau2_res)`.
pub fn fit_mixed(data: &MetaDataset, mods: &ModeratorSpec, method: VarianceMethod) -> Result<RegressionFit> {
    need_residual_df(data, mods)?;
    let fixed = fit_fixed(data, mods)?;
    let (tau2, loglik) = match method {
        VarianceMethod::Mm => (tau2_res_mm(data, mods)?, None),
        VarianceMethod::Ml | VarianceMethod::Reml => {
            let x = mods.design(data)?;
            let y = data.effects();
            let v = data.variances();
            let upper = 100.0 * sample_variance(&y);
            let f = |t2: f64| log_likelihood(&x, &y, &v, t2, method == VarianceMethod::Reml);
            if upper > 0.0 {
                let m = maximize_bounded(f, 0.0, upper, LIKELIHOOD_TOL, LIKELIHOOD_MAX_ITER)?;
                (m.arg, Some(m.value))
            } else {
                (0.0, Some(f(0.0)?))
            }
        }
    };
    with_tau2(data, mods, tau2, method, loglik, &fixed)
}

fn with_tau2(
    data: &MetaDataset,
    mods: &ModeratorSpec,
    tau2: f64,
    method: VarianceMethod,
    loglik: Option<f64>,
    fixed: &RegressionFit,
) -> Result<RegressionFit> {
    let x = mods.design(data)?;
    let w: Vec<f64> = data.variances().iter().map(|v| 1.0 / (v + tau2)).collect();
    let sol = wls_solve(&x, &data.effects(), &w)?;
    Ok(RegressionFit {
        names: mods.coef_names(),
        beta: sol.beta,
        cov: sol.cov_unscaled,
        model: RegModel::Mixed,
        method: Some(method),
        tau2_res: tau2,
        q_res: fixed.q_res,
        df_res: fixed.df_res,
        i2_res: fixed.i2_res,
        loglik,
        weights: w,
        residuals: sol.residuals,
        k: data.k(),
    })
}

/// `I^2_res` via the typical variance, `tau2_res / (S^2 + tau2_res)`.
pub fn i2_res_from_tau2(data: &MetaDataset, tau2_res: f64) -> Result<f64> {
    let s2 = typical_variance(&data.fixed_weights())?;
    Ok(tau2_res / (s2 + tau2_res))
}

/// Share of between-study variance explained by moderators, truncated to [0, 1].
pub fn pseudo_r2(tau2_total: f64, tau2_res: f64) -> f64 {
    if !(tau2_total > 0.0) {
        return 0.0;
    }
    (1.0 - tau2_res / tau2_total).clamp(0.0, 1.0)
}

/// Joint Wald test that every slope is zero.
pub fn omnibus_test(fit: &RegressionFit) -> Result<WaldTest> {
    if fit.p() == 0 {
        return Err(MetaError::Domain("omnibus test needs at least one moderator".into()));
    }
    let idx: Vec<usize> = (1..fit.beta.len()).collect();
    wald_test(&fit.beta, &fit.cov, &idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrTest {
    pub lr: f64,
    pub df: usize,
    pub p_value: f64,
}

/// `LR = -2 (lnL_reduced - lnL_full)` against chi-square with `df`.
///
/// REML likelihoods of models with different fixed parts are not comparable;
/// `same_fixed_part = false` with REML is rejected. Small negative values from
/// optimizer noise are clamped to zero.
pub fn lr_statistic(
    full_loglik: f64,
    reduced_loglik: f64,
    df: usize,
    estimation: VarianceMethod,
    same_fixed_part: bool,
) -> Result<LrTest> {
    match estimation {
        VarianceMethod::Mm => {
            return Err(MetaError::InvalidComparison("moment estimates have no likelihood".into()))
        }
        VarianceMethod::Reml if !same_fixed_part => {
            return Err(MetaError::InvalidComparison(
                "REML likelihoods are only comparable for identical fixed parts".into(),
            ))
        }
        _ => {}
    }
    if df == 0 {
        return Err(MetaError::InvalidComparison("models have the same number of parameters".into()));
    }
    let mut lr = -2.0 * (reduced_loglik - full_loglik);
    if lr < 0.0 {
        if lr < -1e-6 {
            log::warn!("negative likelihood ratio {lr} clamped to zero");
        }
        lr = 0.0;
    }
    Ok(LrTest { lr, df, p_value: chisq_sf(lr, df as f64)? })
}

/// Likelihood-ratio comparison of two fitted mixed models.
pub fn lr_test(full: &RegressionFit, reduced: &RegressionFit) -> Result<LrTest> {
    let (Some(l1), Some(l0)) = (full.loglik, reduced.loglik) else {
        return Err(MetaError::InvalidComparison("both fits need a likelihood (ml or reml)".into()));
    };
    let method = full.method.ok_or_else(|| MetaError::InvalidComparison("full fit has no method".into()))?;
    if reduced.method != Some(method) {
        return Err(MetaError::InvalidComparison("fits use different estimation methods".into()));
    }
    if full.k != reduced.k {
        return Err(MetaError::InvalidComparison("fits use different data".into()));
    }
    if !reduced.names.iter().all(|n| full.names.contains(n)) {
        return Err(MetaError::InvalidComparison("reduced model is not nested in the full model".into()));
    }
    let df = full.beta.len().saturating_sub(reduced.beta.len());
    lr_statistic(l1, l0, df, method, full.names == reduced.names)
}

/// Knapp-Hartung test for one coefficient of a mixed fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KhTest {
    pub test: CoefTest,
    /// `max(1, Q*/(k - p - 1))` with random-effects weights and mixed residuals.
    pub scale: f64,
    pub interval: Interval,
}

pub fn coef_test_kh(fit: &RegressionFit, coef_index: usize, level: f64) -> Result<KhTest> {
    if fit.model != RegModel::Mixed {
        return Err(MetaError::Domain("Knapp-Hartung test needs a mixed-effects fit".into()));
    }
    let c = fit.beta.len();
    if fit.k <= c {
        return Err(MetaError::TooFewStudies { params: c, got: fit.k });
    }
    if coef_index >= c {
        return Err(MetaError::DimensionMismatch(format!("no coefficient {coef_index}")));
    }
    let df = (fit.k - c) as f64;
    let q_star: f64 = fit.weights.iter().zip(&fit.residuals).map(|(w, r)| w * r * r).sum();
    let scale = (q_star / df).max(1.0);
    let se = (scale * fit.cov[(coef_index, coef_index)]).sqrt();
    let test = CoefTest::two_sided(fit.beta[coef_index], se, Some(df));
    let interval =
        Interval::symmetric(fit.beta[coef_index], t_crit(level, df)? * se, level, IntervalMethod::HksjMod);
    Ok(KhTest { test, scale, interval })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heterogeneity::{cochran_q, tau2_dl};
    use crate::pooling::{pool_fixed, pool_random};

    fn three_point() -> MetaDataset {
        MetaDataset::with_moderators(&[1.0, 2.0, 4.0], &[1.0; 3], &["x"], &[vec![0.0, 1.0, 2.0]]).unwrap()
    }

    fn fixture() -> MetaDataset {
        MetaDataset::with_moderators(
            &[0.12, 0.35, 0.18, 0.61, 0.44, 0.05, 0.72, 0.38],
            &[0.10, 0.15, 0.08, 0.20, 0.12, 0.09, 0.25, 0.11],
            &["x", "z"],
            &[vec![0.0, 1.0, 0.5, 2.0, 1.5, 0.2, 2.5, 1.0], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]],
        )
        .unwrap()
    }

    #[test]
    fn intercept_only_reduces_to_pooling() {
        let d = fixture();
        let none = ModeratorSpec::none();
        let f = fit_fixed(&d, &none).unwrap();
        let p = pool_fixed(&d).unwrap();
        assert!((f.beta[0] - p.mu_hat).abs() < 1e-10);
        assert!((f.cov[(0, 0)] - p.var_hat).abs() < 1e-10);
        let m = fit_mixed(&d, &none, VarianceMethod::Mm).unwrap();
        let r = pool_random(&d, tau2_dl(&d).unwrap()).unwrap();
        assert!((m.beta[0] - r.mu_hat).abs() < 1e-10);
        assert!((m.cov[(0, 0)] - r.var_hat).abs() < 1e-10);
        assert!((tau2_res_mm(&d, &none).unwrap() - tau2_dl(&d).unwrap()).abs() < 1e-10);
        assert!((q_res_test(&d, &none).unwrap().q - cochran_q(&d).unwrap().q).abs() < 1e-12);
    }

    #[test]
    fn perfect_fit() {
        let x = vec![0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.0 + 2.0 * v).collect();
        let d = MetaDataset::with_moderators(&y, &[0.5; 4], &["x"], &[x]).unwrap();
        let mods = ModeratorSpec::new(&["x"]).unwrap();
        let f = fit_fixed(&d, &mods).unwrap();
        assert!((f.beta[0] - 1.0).abs() < 1e-12 && (f.beta[1] - 2.0).abs() < 1e-12);
        assert!(f.q_res < 1e-20);
        let q = q_res_test(&d, &mods).unwrap();
        assert!((q.p_value - 1.0).abs() < 1e-12);
        assert_eq!(tau2_res_mm(&d, &mods).unwrap(), 0.0);
        let m = fit_mixed(&d, &mods, VarianceMethod::Mm).unwrap();
        assert_eq!(m.beta, f.beta);
    }

    #[test]
    fn three_point_hand_computation() {
        // OLS: intercept 5/6, slope 3/2, residuals (1/6, -1/3, 1/6), RSS = 1/6.
        let d = three_point();
        let mods = ModeratorSpec::new(&["x"]).unwrap();
        let f = fit_fixed(&d, &mods).unwrap();
        assert!((f.beta[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!((f.beta[1] - 1.5).abs() < 1e-12);
        let q = q_res_test(&d, &mods).unwrap();
        assert!((q.q - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(q.df, 1);
    }

    #[test]
    fn trace_matches_dense_matrix() {
        let d = fixture();
        let mods = ModeratorSpec::new(&["x", "z"]).unwrap();
        let x = mods.design(&d).unwrap();
        let w = d.fixed_weights();
        let sol = wls_solve(&x, &d.effects(), &w).unwrap();
        let wm = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(w.clone()));
        let xm = x.matrix();
        let m = &wm - &wm * xm * (xm.transpose() * &wm * xm).try_inverse().unwrap() * xm.transpose() * &wm;
        assert!((m.trace() - trace_m(&x, &w, &sol.cov_unscaled)).abs() < 1e-8 * m.trace());
    }

    #[test]
    fn adding_moderator_never_raises_q_res() {
        let d = fixture();
        let q0 = q_res_test(&d, &ModeratorSpec::none()).unwrap().q;
        let q1 = q_res_test(&d, &ModeratorSpec::new(&["x"]).unwrap()).unwrap().q;
        let q2 = q_res_test(&d, &ModeratorSpec::new(&["x", "z"]).unwrap()).unwrap().q;
        assert!(q1 <= q0 + 1e-12 && q2 <= q1 + 1e-12);
    }

    #[test]
    fn pseudo_r2_examples() {
        assert_eq!(pseudo_r2(0.08, 0.08), 0.0);
        assert_eq!(pseudo_r2(0.08, 0.0), 1.0);
        assert!((pseudo_r2(0.08, 0.02) - 0.75).abs() < 1e-15);
        assert_eq!(pseudo_r2(0.0, 0.01), 0.0);
        assert_eq!(pseudo_r2(0.05, 0.2), 0.0);
    }

    #[test]
    fn omnibus_single_slope_is_squared_z() {
        let d = fixture();
        let mods = ModeratorSpec::new(&["x"]).unwrap();
        let fit = fit_mixed(&d, &mods, VarianceMethod::Reml).unwrap();
        let om = omnibus_test(&fit).unwrap();
        let z = fit.z_test(1).stat;
        assert!((om.stat - z * z).abs() < 1e-12 * om.stat.max(1.0));
        assert_eq!(om.df, 1);
    }

    #[test]
    fn lr_rules() {
        let same = lr_statistic(-3.0, -3.0, 1, VarianceMethod::Ml, false).unwrap();
        assert_eq!(same.lr, 0.0);
        assert_eq!(same.p_value, 1.0);
        assert!(matches!(
            lr_statistic(-3.0, -4.0, 1, VarianceMethod::Reml, false),
            Err(MetaError::InvalidComparison(_))
        ));
        let d = fixture();
        let full = fit_mixed(&d, &ModeratorSpec::new(&["x"]).unwrap(), VarianceMethod::Ml).unwrap();
        let red = fit_mixed(&d, &ModeratorSpec::none(), VarianceMethod::Ml).unwrap();
        let t = lr_test(&full, &red).unwrap();
        assert!(t.lr >= 0.0);
        assert_eq!(t.df, 1);
        let full_r = fit_mixed(&d, &ModeratorSpec::new(&["x"]).unwrap(), VarianceMethod::Reml).unwrap();
        let red_r = fit_mixed(&d, &ModeratorSpec::none(), VarianceMethod::Reml).unwrap();
        assert!(matches!(lr_test(&full_r, &red_r), Err(MetaError::InvalidComparison(_))));
    }

    #[test]
    fn knapp_hartung_scaling() {
        let d = fixture();
        let mods = ModeratorSpec::new(&["x"]).unwrap();
        let fit = fit_mixed(&d, &mods, VarianceMethod::Reml).unwrap();
        let kh = coef_test_kh(&fit, 1, 0.95).unwrap();
        assert!(kh.scale >= 1.0);
        let df = (d.k() - 2) as f64;
        let plain = 2.0 * t_crit(0.95, df).unwrap() * fit.se(1);
        assert!(kh.interval.width() >= plain - 1e-12);
        if kh.scale == 1.0 {
            assert!((kh.test.stat - fit.beta[1] / fit.se(1)).abs() < 1e-12);
        }
        assert!(coef_test_kh(&fit_fixed(&d, &mods).unwrap(), 1, 0.95).is_err());
    }

    #[test]
    fn method_parsing() {
        assert_eq!("reml".parse::<VarianceMethod>().unwrap(), VarianceMethod::Reml);
        assert!(matches!("eb".parse::<VarianceMethod>(), Err(MetaError::UnsupportedMethod(_))));
    }

    #[test]
    fn errors() {
        let d = three_point();
        let mods = ModeratorSpec::new(&["x"]).unwrap();
        let two = d.subset(&[0, 1]).unwrap();
        assert!(matches!(tau2_res_mm(&two, &mods), Err(MetaError::TooFewStudies { .. })));
        assert!(fit_fixed(&two, &mods).is_ok());
        let dup = MetaDataset::with_moderators(&[1.0, 2.0, 3.0], &[1.0; 3], &["x", "y"], &[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]])
            .unwrap();
        assert!(matches!(
            fit_fixed(&dup, &ModeratorSpec::new(&["x", "y"]).unwrap()),
            Err(MetaError::RankDeficient { .. })
        ));
        assert!(matches!(ModeratorSpec::new(&["x", "x"]), Err(MetaError::Domain(_))));
    }
}
