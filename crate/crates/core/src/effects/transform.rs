use crate::error::{MetaError, Result};

/// Partial correlation and its standard error from a regression t statistic.
pub fn partial_correlation(t_stat: f64, df: f64) -> Result<(f64, f64)> {
    if !t_stat.is_finite() {
        return Err(MetaError::Domain(format!("t statistic must be finite, got {t_stat}")));
    }
    if !(df >= 1.0) || !df.is_finite() {
        return Err(MetaError::Domain(format!("df must be at least 1, got {df}")));
    }
    let r = t_stat / (t_stat * t_stat + df).sqrt();
    let se = ((1.0 - r * r) / df).sqrt();
    Ok((r, se))
}

/// Partial correlation from a z statistic and sample size, `z / sqrt(n)`.
///
/// The result is not clamped: large `z` relative to `sqrt(n)` gives `|r| >= 1`,
/// which callers must flag.
pub fn partial_correlation_from_z(z_stat: f64, n: f64) -> Result<f64> {
    if !z_stat.is_finite() {
        return Err(MetaError::Domain(format!("z statistic must be finite, got {z_stat}")));
    }
    if !(n >= 1.0) || !n.is_finite() {
        return Err(MetaError::Domain(format!("n must be at least 1, got {n}")));
    }
    Ok(z_stat / n.sqrt())
}

pub fn fisher_z(r: f64) -> Result<f64> {
    if !(r.abs() < 1.0) {
        return Err(MetaError::Domain(format!("Fisher z needs |r| < 1, got {r}")));
    }
    Ok(r.atanh())
}

pub fn fisher_z_inverse(z: f64) -> f64 {
    z.tanh()
}

/// Sampling variance `1 / (n - 3 - p)` of a Fisher-z transformed (partial) correlation
/// with `p` controls.
pub fn fisher_z_variance(n: f64, p: f64) -> Result<f64> {
    let d = n - 3.0 - p;
    if !(d >= 1.0) {
        return Err(MetaError::Domain(format!("n - 3 - p must be at least 1, got {d}")));
    }
    Ok(1.0 / d)
}
