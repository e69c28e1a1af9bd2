//! Fixed-effect and random-effects pooling with Wald, t, Hartung-Knapp
//! and prediction intervals.

use serde::{Deserialize, Serialize};

use crate::effects::MetaDataset;
use crate::error::{MetaError, Result};
use crate::statkernel::{norm_quantile, t_quantile, weighted_mean};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolModel {
    Fixed,
    Random,
}

/// Pooled estimate with the weights that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolResult {
    pub mu_hat: f64,
    /// `1 / sum(weights)`.
    pub var_hat: f64,
    pub weights: Vec<f64>,
    pub model: PoolModel,
    /// Between-study variance used in the weights; zero for the fixed model.
    pub tau2: f64,
    pub k: usize,
}

impl PoolResult {
    pub fn se(&self) -> f64 {
        self.var_hat.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    WaldZ,
    TKm1,
    TKm2,
    TKm4,
    Hksj,
    HksjMod,
    Prediction,
    Uwls,
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub method: IntervalMethod,
    /// Zero width because the scale estimate vanished.
    pub degenerate: bool,
}

impl Interval {
    pub fn symmetric(center: f64, half_width: f64, level: f64, method: IntervalMethod) -> Self {
        Self { lo: center - half_width, hi: center + half_width, level, method, degenerate: half_width == 0.0 }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Reference distribution for [`ci_standard`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfRule {
    Z,
    KMinus1,
    KMinus2,
    KMinus4,
}

impl DfRule {
    fn offset(self) -> Option<usize> {
        match self {
            DfRule::Z => None,
            DfRule::KMinus1 => Some(1),
            DfRule::KMinus2 => Some(2),
            DfRule::KMinus4 => Some(4),
        }
    }

    fn method(self) -> IntervalMethod {
        match self {
            DfRule::Z => IntervalMethod::WaldZ,
            DfRule::KMinus1 => IntervalMethod::TKm1,
            DfRule::KMinus2 => IntervalMethod::TKm2,
            DfRule::KMinus4 => IntervalMethod::TKm4,
        }
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(MetaError::Domain(format!("confidence level must lie in (0, 1), got {level}")))
    }
}

/// Upper `(1 - level) / 2` quantile of t with `df` degrees of freedom.
pub fn t_crit(level: f64, df: f64) -> Result<f64> {
    check_level(level)?;
    t_quantile(0.5 + 0.5 * level, df)
}

pub fn z_crit(level: f64) -> Result<f64> {
    check_level(level)?;
    norm_quantile(0.5 + 0.5 * level)
}

/// Inverse-variance weighted mean.
pub fn pool_fixed(data: &MetaDataset) -> Result<PoolResult> {
    let y = data.effects();
    let w = data.fixed_weights();
    let (mu_hat, var_hat) = weighted_mean(&y, &w);
    Ok(PoolResult { mu_hat, var_hat, weights: w, model: PoolModel::Fixed, tau2: 0.0, k: data.k() })
}

/// Weighted mean with weights `1 / (S_i^2 + tau2)`.
pub fn pool_random(data: &MetaDataset, tau2: f64) -> Result<PoolResult> {
    if !(tau2 >= 0.0) || !tau2.is_finite() {
        return Err(MetaError::NegativeTau2(tau2));
    }
    let y = data.effects();
    let w: Vec<f64> = data.variances().iter().map(|v| 1.0 / (v + tau2)).collect();
    let (mu_hat, var_hat) = weighted_mean(&y, &w);
    Ok(PoolResult { mu_hat, var_hat, weights: w, model: PoolModel::Random, tau2, k: data.k() })
}

/// `mu_hat -/+ q * sqrt(var_hat)` with `q` from the normal or a t with `k - c` df.
pub fn ci_standard(result: &PoolResult, level: f64, df_rule: DfRule) -> Result<Interval> {
    let q = match df_rule.offset() {
        None => z_crit(level)?,
        Some(c) => {
            if result.k <= c {
                return Err(MetaError::InsufficientStudies { needed: c + 1, got: result.k });
            }
            t_crit(level, (result.k - c) as f64)?
        }
    };
    Ok(Interval::symmetric(result.mu_hat, q * result.se(), level, df_rule.method()))
}

/// Hartung-Knapp scale factor and the rescaled variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HksjVariance {
    /// `sum w*_i (y_i - mu_R)^2 / (k - 1)`.
    pub q: f64,
    /// `q`, or `max(1, q)` under the Rover modification.
    pub q_used: f64,
    pub var_s: f64,
}

pub fn hksj_variance(data: &MetaDataset, result: &PoolResult, rover_mod: bool) -> Result<HksjVariance> {
    let k = data.k();
    if k < 2 {
        return Err(MetaError::InsufficientStudies { needed: 2, got: k });
    }
    if result.weights.len() != k {
        return Err(MetaError::DimensionMismatch("pool result does not belong to this dataset".into()));
    }
    let q = data
        .effects()
        .iter()
        .zip(&result.weights)
        .map(|(y, w)| w * (y - result.mu_hat).powi(2))
        .sum::<f64>()
        / (k - 1) as f64;
    let q_used = if rover_mod { q.max(1.0) } else { q };
    Ok(HksjVariance { q, q_used, var_s: q_used * result.var_hat })
}

/// Hartung-Knapp-Sidik-Jonkman interval on `t_{k-1}`, optionally with `q* = max(1, q)`.
pub fn ci_hksj(data: &MetaDataset, result: &PoolResult, level: f64, rover_mod: bool) -> Result<Interval> {
    if result.model != PoolModel::Random {
        return Err(MetaError::Domain("Hartung-Knapp interval needs a random-effects pool".into()));
    }
    let h = hksj_variance(data, result, rover_mod)?;
    let crit = t_crit(level, (data.k() - 1) as f64)?;
    let method = if rover_mod { IntervalMethod::HksjMod } else { IntervalMethod::Hksj };
    let iv = Interval::symmetric(result.mu_hat, crit * h.var_s.sqrt(), level, method);
    if iv.degenerate {
        log::warn!("Hartung-Knapp scale q is zero; interval has zero width");
    }
    Ok(iv)
}

/// `mu_R -/+ t_{k-2} sqrt(var + tau2)` for the effect of a new study.
pub fn prediction_interval(result: &PoolResult, level: f64) -> Result<Interval> {
    if result.model != PoolModel::Random {
        return Err(MetaError::Domain("prediction interval needs a random-effects pool".into()));
    }
    if result.k < 3 {
        return Err(MetaError::InsufficientStudies { needed: 3, got: result.k });
    }
    let crit = t_crit(level, (result.k - 2) as f64)?;
    Ok(Interval::symmetric(
        result.mu_hat,
        crit * (result.var_hat + result.tau2).sqrt(),
        level,
        IntervalMethod::Prediction,
    ))
}
