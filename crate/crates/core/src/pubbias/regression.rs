use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::effects::MetaDataset;
use crate::error::{MetaError, Result};
use crate::metareg::ModeratorSpec;
use crate::statkernel::{wald_test, wls_solve, CoefTest, DesignMatrix, WaldTest};

/// Largest tolerated gap between the weighted fit and its transformed OLS twin.
const ROUTE_TOL: f64 = 1e-8;

/// A bias regression fitted twice: WLS with weights `1/S^2` on the effect
/// scale, and OLS on the model divided through by `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasRegression {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    /// Covariance scaled by the residual mean square.
    pub cov: DMatrix<f64>,
    pub mse: f64,
    pub df: usize,
    /// Coefficients of the transformed OLS fit, in the order of `beta`.
    pub beta_transformed: Vec<f64>,
    /// `max_j |beta_j - beta_transformed_j|`.
    pub route_gap: f64,
}

impl BiasRegression {
    pub fn se(&self, j: usize) -> f64 {
        self.cov[(j, j)].max(0.0).sqrt()
    }

    /// Two-sided t test with `k - c` df.
    pub fn coef_test(&self, j: usize) -> CoefTest {
        CoefTest::two_sided(self.beta[j], self.se(j), Some(self.df as f64))
    }

    pub fn joint_test(&self, idx: &[usize]) -> Result<WaldTest> {
        wald_test(&self.beta, &self.cov, idx)
    }
}

/// One route: design, response and weights.
struct Route {
    columns: Vec<Vec<f64>>,
    response: Vec<f64>,
    weights: Vec<f64>,
}

fn design(columns: &[Vec<f64>]) -> Result<DesignMatrix> {
    let k = columns[0].len();
    DesignMatrix::general(DMatrix::from_fn(k, columns.len(), |i, j| columns[j][i]))
}

/// `ols_order[j]` is the position in the transformed fit of coefficient `j`.
fn dual_fit(names: Vec<String>, wls: Route, ols: Route, ols_order: &[usize]) -> Result<BiasRegression> {
    let a = wls_solve(&design(&wls.columns)?, &wls.response, &wls.weights)?;
    let b = wls_solve(&design(&ols.columns)?, &ols.response, &ols.weights)?;
    let beta_transformed: Vec<f64> = ols_order.iter().map(|&p| b.beta[p]).collect();
    let route_gap = a
        .beta
        .iter()
        .zip(&beta_transformed)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a.beta.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if route_gap > ROUTE_TOL * scale {
        log::warn!("weighted and transformed bias regressions disagree by {route_gap:e}");
    }
    Ok(BiasRegression {
        names,
        cov: a.cov_scaled(),
        mse: a.mse,
        df: a.df_resid(),
        beta: a.beta,
        beta_transformed,
        route_gap,
    })
}

fn check_inputs(data: &MetaDataset, params: usize) -> Result<()> {
    if data.k() <= params {
        return Err(MetaError::TooFewStudies { params, got: data.k() });
    }
    let s = data.ses();
    if s.iter().all(|v| *v == s[0]) {
        return Err(MetaError::DegenerateDesign("all standard errors are equal".into()));
    }
    Ok(())
}

fn ones(k: usize) -> Vec<f64> {
    vec![1.0; k]
}

fn precision(s: &[f64]) -> Vec<f64> {
    s.iter().map(|v| 1.0 / v).collect()
}

fn t_values(y: &[f64], s: &[f64]) -> Vec<f64> {
    y.iter().zip(s).map(|(a, b)| a / b).collect()
}

/// Severity of funnel asymmetry from the FAT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FatSeverity {
    LittleToModest,
    Substantial,
    Severe,
}

impl FatSeverity {
    /// Not significant or `|b0| < 1`: little to modest; significant with
    /// `1 <= |b0| <= 2`: substantial; significant with `|b0| > 2`: severe.
    pub fn classify(b0: f64, significant: bool) -> Self {
        let a = b0.abs();
        if !significant || a < 1.0 {
            FatSeverity::LittleToModest
        } else if a <= 2.0 {
            FatSeverity::Substantial
        } else {
            FatSeverity::Severe
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FatResult {
    /// Asymmetry coefficient on `S` (intercept of the t-scale model).
    pub asymmetry: CoefTest,
    /// Precision coefficient, the effect beyond bias.
    pub effect: CoefTest,
    pub severity: FatSeverity,
    /// Coefficients ordered (intercept, se).
    pub regression: BiasRegression,
}

fn fat_fit(data: &MetaDataset, absolute: bool) -> Result<BiasRegression> {
    check_inputs(data, 2)?;
    let k = data.k();
    let s = data.ses();
    let mut y = data.effects();
    if absolute {
        y.iter_mut().for_each(|v| *v = v.abs());
    }
    let t = t_values(&y, &s);
    dual_fit(
        vec!["intercept".into(), "se".into()],
        Route { columns: vec![ones(k), s.clone()], response: y, weights: data.fixed_weights() },
        Route { columns: vec![ones(k), precision(&s)], response: t, weights: ones(k) },
        &[1, 0],
    )
}

/// Egger funnel-asymmetry test `y = b1 + b0 S` with weights `1/S^2`. The
/// severity uses significance at `alpha`.
pub fn egger_fat_at(data: &MetaDataset, alpha: f64) -> Result<FatResult> {
    let regression = fat_fit(data, false)?;
    let asymmetry = regression.coef_test(1);
    let effect = regression.coef_test(0);
    let severity = FatSeverity::classify(asymmetry.estimate, asymmetry.rejects(alpha));
    Ok(FatResult { asymmetry, effect, severity, regression })
}

pub fn egger_fat(data: &MetaDataset) -> Result<FatResult> {
    egger_fat_at(data, 0.05)
}

/// Precision-effect test: the coefficient on precision in the t-scale model.
pub fn pet(data: &MetaDataset) -> Result<CoefTest> {
    Ok(fat_fit(data, false)?.coef_test(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Type2Result {
    pub asymmetry: CoefTest,
    pub regression: BiasRegression,
}

/// Test for significance-driven selection: `|y| = b1 + b0 S`.
pub fn type2_test(data: &MetaDataset) -> Result<Type2Result> {
    let regression = fat_fit(data, true)?;
    Ok(Type2Result { asymmetry: regression.coef_test(1), regression })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeeseResult {
    /// Intercept, the bias-corrected effect.
    pub effect: CoefTest,
    /// Coefficient on the variance.
    pub bias: CoefTest,
    /// Coefficients ordered (intercept, variance).
    pub regression: BiasRegression,
}

/// `y = l1 + l0 S^2` with weights `1/S^2`; transformed `t = l0 S + l1 / S`.
pub fn peese(data: &MetaDataset) -> Result<PeeseResult> {
    check_inputs(data, 2)?;
    let k = data.k();
    let s = data.ses();
    let y = data.effects();
    let t = t_values(&y, &s);
    let regression = dual_fit(
        vec!["intercept".into(), "variance".into()],
        Route { columns: vec![ones(k), data.variances()], response: y, weights: data.fixed_weights() },
        Route { columns: vec![s.clone(), precision(&s)], response: t, weights: ones(k) },
        &[1, 0],
    )?;
    Ok(PeeseResult { effect: regression.coef_test(0), bias: regression.coef_test(1), regression })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PetPeeseBranch {
    Pet,
    Peese,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PetPeese {
    pub estimate: f64,
    pub branch: PetPeeseBranch,
    pub pet: CoefTest,
    pub peese: CoefTest,
}

/// PEESE when PET rejects a zero effect at `alpha`, PET otherwise.
pub fn pet_peese(data: &MetaDataset, alpha: f64) -> Result<PetPeese> {
    let p = pet(data)?;
    let q = peese(data)?.effect;
    let (estimate, branch) =
        if p.rejects(alpha) { (q.estimate, PetPeeseBranch::Peese) } else { (p.estimate, PetPeeseBranch::Pet) };
    Ok(PetPeese { estimate, branch, pet: p, peese: q })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedFit {
    /// Coefficients ordered (intercept, Z..., se or variance, K interactions...).
    pub regression: BiasRegression,
    /// Joint test that the bias term and every K interaction vanish.
    pub selection_test: WaldTest,
    /// Joint test that every Z coefficient vanishes; `None` without Z.
    pub heterogeneity_test: Option<WaldTest>,
}

/// FAT-PET (or PEESE with `quadratic`) extended with moderators `z` that shift
/// the true effect and moderators `kmods` that interact with the bias term.
pub fn extended_fat_pet(
    data: &MetaDataset,
    z: &ModeratorSpec,
    kmods: &ModeratorSpec,
    quadratic: bool,
) -> Result<ExtendedFit> {
    let nz = z.len();
    let nk = kmods.len();
    let params = 2 + nz + nk;
    check_inputs(data, params)?;
    let k = data.k();
    let s = data.ses();
    let y = data.effects();
    let bias_term: Vec<f64> = if quadratic { data.variances() } else { s.clone() };
    let zcols = z.columns().iter().map(|c| data.moderator(c)).collect::<Result<Vec<_>>>()?;
    let kcols = kmods.columns().iter().map(|c| data.moderator(c)).collect::<Result<Vec<_>>>()?;
    let div = |col: &[f64]| -> Vec<f64> { col.iter().zip(&s).map(|(a, b)| a / b).collect() };
    let times = |col: &[f64], by: &[f64]| -> Vec<f64> { col.iter().zip(by).map(|(a, b)| a * b).collect() };

    let bias_name = if quadratic { "variance" } else { "se" };
    let mut names = vec!["intercept".to_string()];
    names.extend(z.columns().iter().cloned());
    names.push(bias_name.to_string());
    names.extend(kmods.columns().iter().map(|c| format!("{bias_name}:{c}")));

    let mut wls_cols = vec![ones(k)];
    wls_cols.extend(zcols.iter().cloned());
    wls_cols.push(bias_term.clone());
    wls_cols.extend(kcols.iter().map(|c| times(c, &bias_term)));

    // t-scale columns follow the same coefficient order.
    let bias_t: Vec<f64> = div(&bias_term);
    let mut ols_cols = vec![precision(&s)];
    ols_cols.extend(zcols.iter().map(|c| div(c)));
    ols_cols.push(bias_t.clone());
    ols_cols.extend(kcols.iter().map(|c| times(c, &bias_t)));

    let order: Vec<usize> = (0..params).collect();
    let regression = dual_fit(
        names,
        Route { columns: wls_cols, response: y.clone(), weights: data.fixed_weights() },
        Route { columns: ols_cols, response: t_values(&y, &s), weights: ones(k) },
        &order,
    )?;
    let sel_idx: Vec<usize> = (1 + nz..params).collect();
    let selection_test = regression.joint_test(&sel_idx)?;
    let heterogeneity_test =
        if nz > 0 { Some(regression.joint_test(&(1..1 + nz).collect::<Vec<_>>())?) } else { None };
    Ok(ExtendedFit { regression, selection_test, heterogeneity_test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MstResult {
    /// Slope of `ln|t|` on `ln df`, tested one-sided against `slope > 0`.
    pub slope: CoefTest,
    pub intercept: f64,
    /// Records dropped because their t value is zero.
    pub dropped: usize,
    pub k_used: usize,
}

/// Meta-significance test: OLS of `ln|t_i|` on `ln df_i`.
pub fn mst(data: &MetaDataset) -> Result<MstResult> {
    let mut lt = Vec::new();
    let mut ldf = Vec::new();
    let mut dropped = 0;
    for (i, r) in data.records().iter().enumerate() {
        let df = r.df.ok_or(MetaError::MissingDf(i))?;
        if !(df >= 1.0) {
            return Err(MetaError::Domain(format!("record {i} has df {df} < 1")));
        }
        let t = r.t_value();
        if t == 0.0 {
            dropped += 1;
            continue;
        }
        lt.push(t.abs().ln());
        ldf.push(df.ln());
    }
    if dropped > 0 {
        log::warn!("meta-significance test dropped {dropped} records with t = 0");
    }
    if lt.len() < 3 {
        return Err(if dropped > 0 {
            MetaError::ZeroTStatistic
        } else {
            MetaError::TooFewStudies { params: 2, got: lt.len() }
        });
    }
    if ldf.iter().all(|v| *v == ldf[0]) {
        return Err(MetaError::DegenerateDesign("all degrees of freedom are equal".into()));
    }
    let n = lt.len();
    let x = DesignMatrix::with_intercept(n, &[ldf])?;
    let sol = wls_solve(&x, &lt, &vec![1.0; n])?;
    let se = (sol.cov_unscaled[(1, 1)] * sol.mse).max(0.0).sqrt();
    Ok(MstResult {
        slope: CoefTest::upper(sol.beta[1], se, Some((n - 2) as f64)),
        intercept: sol.beta[0],
        dropped,
        k_used: n,
    })
}
