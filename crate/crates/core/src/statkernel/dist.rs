//! Normal, Student t and chi-square distribution functions.
//!
//! Special functions (regularized incomplete beta and gamma, complementary
//! error function) come from `statrs`; quantiles are obtained here by
//! safeguarded Newton iteration on the CDFs.

use statrs::function::beta::beta_reg;
use libm::erfc;
use statrs::function::erf::erfc_inv;
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{MetaError, Result};

fn check_prob(p: f64) -> Result<()> {
    if p.is_finite() && p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(MetaError::Domain(format!("probability must lie in (0, 1), got {p}")))
    }
}

fn check_df(df: f64) -> Result<()> {
    if df.is_nan() || df <= 0.0 {
        Err(MetaError::Domain(format!("degrees of freedom must be positive, got {df}")))
    } else {
        Ok(())
    }
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal upper tail, accurate far into the tail.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> Result<f64> {
    check_prob(p)?;
    let mut x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    // Newton polish against the tail that carries the precision.
    for _ in 0..2 {
        let err = if p < 0.5 { norm_cdf(x) - p } else { (1.0 - p) - norm_sf(x) };
        let d = norm_pdf(x);
        if d <= 0.0 || !err.is_finite() {
            break;
        }
        x -= err / d;
    }
    Ok(x)
}

/// Student t upper tail probability P(T > t).
pub fn t_sf(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if df.is_infinite() {
        return norm_sf(t);
    }
    let x = df / (df + t * t);
    let tail = 0.5 * beta_reg(0.5 * df, 0.5, x);
    if t >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Student t CDF.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    t_sf(-t, df)
}

fn t_ln_pdf(t: f64, df: f64) -> f64 {
    ln_gamma(0.5 * (df + 1.0))
        - ln_gamma(0.5 * df)
        - 0.5 * (df * std::f64::consts::PI).ln()
        - 0.5 * (df + 1.0) * (1.0 + t * t / df).ln()
}

/// Student t quantile.
pub fn t_quantile(p: f64, df: f64) -> Result<f64> {
    check_prob(p)?;
    check_df(df)?;
    if df.is_infinite() {
        return norm_quantile(p);
    }
    if df > 1e6 {
        // Cornish-Fisher expansion; the incomplete beta loses accuracy for huge df.
        let z = norm_quantile(p)?;
        let z3 = z * z * z;
        let z5 = z3 * z * z;
        return Ok(z + (z3 + z) / (4.0 * df) + (5.0 * z5 + 16.0 * z3 + 3.0 * z) / (96.0 * df * df));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Solve for the upper tail probability q = min(p, 1 - p) with t > 0.
    let upper = p > 0.5;
    let q = if upper { 1.0 - p } else { p };
    let z = norm_quantile(1.0 - q)?;
    // Bracket [lo, hi] with sf(lo) >= q >= sf(hi).
    let mut lo = 0.0_f64;
    let mut hi = z.max(1.0);
    while t_sf(hi, df) > q {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(MetaError::Domain(format!("t quantile overflow at p = {p}, df = {df}")));
        }
    }
    let mut x = z.clamp(lo, hi);
    for _ in 0..200 {
        let f = t_sf(x, df) - q;
        if f > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = t_ln_pdf(x, df).exp();
        let mut next = x + f / d;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.abs().max(1.0) {
            x = next;
            break;
        }
        x = next;
        if hi - lo <= 1e-15 * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(if upper { x } else { -x })
}

/// Chi-square CDF.
pub fn chisq_cdf(x: f64, df: f64) -> Result<f64> {
    check_df(df)?;
    if x.is_nan() {
        return Err(MetaError::Domain("chi-square argument is NaN".into()));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    Ok(gamma_lr(0.5 * df, 0.5 * x))
}

/// Chi-square upper tail probability.
pub fn chisq_sf(x: f64, df: f64) -> Result<f64> {
    check_df(df)?;
    if x.is_nan() {
        return Err(MetaError::Domain("chi-square argument is NaN".into()));
    }
    if x <= 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    Ok(gamma_ur(0.5 * df, 0.5 * x))
}

/// Two-sided p-value of a t (or z, when `df` is infinite) statistic.
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    (2.0 * t_sf(t.abs(), df)).min(1.0)
}
