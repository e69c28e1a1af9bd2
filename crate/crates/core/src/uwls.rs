//! Unrestricted weighted least squares: fixed-effect point estimates with the
//! variance multiplied by the regression MSE.

use nalgebra::DMatrix;

use crate::effects::MetaDataset;
use crate::error::{MetaError, Result};
use crate::metareg::{fit_fixed, ModeratorSpec, RegressionFit};
use crate::pooling::{pool_fixed, t_crit, Interval, IntervalMethod, PoolResult};
use crate::statkernel::CoefTest;

#[derive(Debug, Clone, PartialEq)]
pub enum UwlsBase {
    Pool(PoolResult),
    Regression(RegressionFit),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UwlsResult {
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    /// `s2` times the fixed-effect covariance.
    pub cov: DMatrix<f64>,
    /// Multiplicative variance factor, the weighted residual MSE.
    pub s2: f64,
    pub df: usize,
    /// `s2 = 0`: every residual vanished and all variances are zero.
    pub degenerate: bool,
    pub base: UwlsBase,
}

impl UwlsResult {
    pub fn se(&self, j: usize) -> f64 {
        self.cov[(j, j)].max(0.0).sqrt()
    }

    /// t test with the MSE degrees of freedom.
    pub fn t_test(&self, j: usize) -> CoefTest {
        CoefTest::two_sided(self.estimates[j], self.se(j), Some(self.df as f64))
    }

    pub fn interval(&self, j: usize, level: f64) -> Result<Interval> {
        let half = t_crit(level, self.df as f64)? * self.se(j);
        Ok(Interval::symmetric(self.estimates[j], half, level, IntervalMethod::Uwls))
    }

    /// The pooled estimate as a fixed-model `PoolResult` with the scaled variance.
    pub fn as_pool(&self) -> Option<PoolResult> {
        match &self.base {
            UwlsBase::Pool(p) => Some(PoolResult { var_hat: self.cov[(0, 0)], ..p.clone() }),
            UwlsBase::Regression(_) => None,
        }
    }
}

fn warn_if_degenerate(s2: f64) -> bool {
    let degenerate = s2 == 0.0;
    if degenerate {
        log::warn!("UWLS scale s2 is zero; all residuals vanish and variances collapse to zero");
    }
    degenerate
}

pub fn uwls_pool(data: &MetaDataset) -> Result<UwlsResult> {
    let k = data.k();
    if k < 2 {
        return Err(MetaError::InsufficientStudies { needed: 2, got: k });
    }
    let fe = pool_fixed(data)?;
    let s2 = data
        .records()
        .iter()
        .map(|r| ((r.effect - fe.mu_hat) / r.se).powi(2))
        .sum::<f64>()
        / (k - 1) as f64;
    Ok(UwlsResult {
        names: vec!["intercept".into()],
        estimates: vec![fe.mu_hat],
        cov: DMatrix::from_element(1, 1, s2 * fe.var_hat),
        s2,
        df: k - 1,
        degenerate: warn_if_degenerate(s2),
        base: UwlsBase::Pool(fe),
    })
}

pub fn uwls_regress(data: &MetaDataset, mods: &ModeratorSpec) -> Result<UwlsResult> {
    let c = mods.len() + 1;
    if data.k() <= c {
        return Err(MetaError::TooFewStudies { params: c, got: data.k() });
    }
    let fe = fit_fixed(data, mods)?;
    let s2 = fe.q_res / fe.df_res as f64;
    Ok(UwlsResult {
        names: fe.names.clone(),
        estimates: fe.beta.clone(),
        cov: &fe.cov * s2,
        s2,
        df: fe.df_res,
        degenerate: warn_if_degenerate(s2),
        base: UwlsBase::Regression(fe),
    })
}
