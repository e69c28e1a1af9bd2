//! Cochran's Q, the DerSimonian-Laird moment estimator and the I^2 / H / R
//! impact measures.

use serde::{Deserialize, Serialize};

use crate::effects::MetaDataset;
use crate::error::{MetaError, Result};
use crate::pooling::pool_fixed;
use crate::statkernel::chisq_sf;

/// A Q-type homogeneity test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QTest {
    pub q: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Qualitative I^2 band: low below 50%, moderate from 50%, high from 75%.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum I2Label {
    Low,
    Moderate,
    High,
}

impl I2Label {
    pub fn from_i2(i2: f64) -> Self {
        if i2 >= 0.75 {
            I2Label::High
        } else if i2 >= 0.5 {
            I2Label::Moderate
        } else {
            I2Label::Low
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub q: f64,
    pub df: usize,
    pub p_value: f64,
    pub tau2: f64,
    /// Typical within-study variance `(k-1) sum w / ((sum w)^2 - sum w^2)`.
    pub s2_typical: f64,
    /// `max(0, (Q - df) / Q)`.
    pub i2: f64,
    /// `tau2 / (S^2 + tau2)`; equal to `i2` up to rounding.
    pub i2_from_tau2: f64,
    pub label: I2Label,
    pub h: f64,
    pub r_ratio: f64,
}

fn need_two(data: &MetaDataset) -> Result<()> {
    if data.k() < 2 {
        Err(MetaError::InsufficientStudies { needed: 2, got: data.k() })
    } else {
        Ok(())
    }
}

pub fn cochran_q(data: &MetaDataset) -> Result<QTest> {
    need_two(data)?;
    let fe = pool_fixed(data)?;
    let q: f64 = data
        .records()
        .iter()
        .map(|r| ((r.effect - fe.mu_hat) / r.se).powi(2))
        .sum();
    let df = data.k() - 1;
    Ok(QTest { q, df, p_value: chisq_sf(q, df as f64)? })
}

/// `sum w - sum w^2 / sum w` for the fixed weights.
fn dl_denominator(w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|v| v * v).sum();
    sw - sw2 / sw
}

/// DerSimonian-Laird moment estimator of the between-study variance.
///
/// Uses the denominator `sum w - sum w^2 / sum w`. Writing `(sum w)^2` in the
/// second term instead cancels the denominator to zero for every input, so
/// that reading is not used.
pub fn tau2_dl(data: &MetaDataset) -> Result<f64> {
    let q = cochran_q(data)?;
    let denom = dl_denominator(&data.fixed_weights());
    if !(denom > 0.0) {
        return Err(MetaError::DegenerateWeights(format!("DL denominator is {denom}")));
    }
    Ok(((q.q - q.df as f64) / denom).max(0.0))
}

/// Typical within-study sampling variance.
pub fn typical_variance(w: &[f64]) -> Result<f64> {
    let k = w.len();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|v| v * v).sum();
    let denom = sw * sw - sw2;
    if k < 2 || !(denom > 0.0) {
        return Err(MetaError::DegenerateWeights("typical variance undefined".into()));
    }
    Ok((k - 1) as f64 * sw / denom)
}

/// Full heterogeneity summary. I^2 is computed both from Q and from
/// `tau2 / (S^2 + tau2)`; the two agree identically.
pub fn i2(data: &MetaDataset) -> Result<HeterogeneityReport> {
    let qt = cochran_q(data)?;
    let tau2 = tau2_dl(data)?;
    let w = data.fixed_weights();
    let s2 = typical_variance(&w)?;
    let df = qt.df as f64;
    let i2_q = if qt.q > 0.0 { ((qt.q - df) / qt.q).max(0.0) } else { 0.0 };
    let i2_tau = tau2 / (s2 + tau2);
    debug_assert!((i2_q - i2_tau).abs() < 1e-8, "I2 forms disagree: {i2_q} vs {i2_tau}");
    let h = (qt.q / df).sqrt();
    let sw: f64 = w.iter().sum();
    let sw_star: f64 = data.variances().iter().map(|v| 1.0 / (v + tau2)).sum();
    Ok(HeterogeneityReport {
        q: qt.q,
        df: qt.df,
        p_value: qt.p_value,
        tau2,
        s2_typical: s2,
        i2: i2_q,
        i2_from_tau2: i2_tau,
        label: I2Label::from_i2(i2_q),
        h,
        r_ratio: (sw / sw_star).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds(y: &[f64], s: &[f64]) -> MetaDataset {
        MetaDataset::from_estimates(y, s).unwrap()
    }

    #[test]
    fn q_examples() {
        let q = cochran_q(&ds(&[1.0, 1.0], &[1.0, 1.0])).unwrap();
        assert_eq!(q.q, 0.0);
        assert_eq!(q.p_value, 1.0);
        let q = cochran_q(&ds(&[0.0, 2.0], &[1.0, 1.0])).unwrap();
        assert!((q.q - 2.0).abs() < 1e-15);
        assert_eq!(q.df, 1);
        let q = cochran_q(&ds(&[1.0, 3.0], &[1.0, 0.5])).unwrap();
        assert!((q.q - 3.2).abs() < 1e-14);
        assert!(cochran_q(&ds(&[1.0], &[1.0])).is_err());
    }

    #[test]
    fn dl_examples() {
        assert!((tau2_dl(&ds(&[0.0, 2.0], &[1.0, 1.0])).unwrap() - 1.0).abs() < 1e-15);
        // Q = 0.5 < df = 2
        assert_eq!(tau2_dl(&ds(&[0.0, 0.5, 1.0], &[1.0, 1.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn i2_examples() {
        let r = i2(&ds(&[0.0, 2.0], &[1.0, 1.0])).unwrap();
        assert!((r.i2 - 0.5).abs() < 1e-15);
        assert_eq!(r.label, I2Label::Moderate);
        assert!((r.h - 2.0f64.sqrt()).abs() < 1e-15);
        // (-1, 0, 1) with unit se gives Q = 2 = k - 1
        let r = i2(&ds(&[-1.0, 0.0, 1.0], &[1.0, 1.0, 1.0])).unwrap();
        assert!((r.q - 2.0).abs() < 1e-12);
        assert!(r.i2.abs() < 1e-12);
        assert_eq!(I2Label::from_i2(0.8), I2Label::High);
        assert_eq!(I2Label::from_i2(0.3), I2Label::Low);
    }

    #[test]
    fn equal_variance_forms_agree() {
        let r = i2(&ds(&[0.1, 0.9, -0.4, 1.3, 0.2], &[0.3; 5])).unwrap();
        assert!((r.i2 - r.i2_from_tau2).abs() < 1e-10);
        assert!((r.s2_typical - 0.09).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn invariants(
            rows in proptest::collection::vec((-3.0f64..3.0, 0.05f64..2.0), 2..25),
            scale in 0.1f64..10.0,
            rot in 0usize..25,
        ) {
            let y: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let s: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let base = i2(&ds(&y, &s)).unwrap();
            prop_assert!((base.i2 - base.i2_from_tau2).abs() < 1e-10);
            prop_assert!(base.i2 >= 0.0 && base.i2 < 1.0);
            prop_assert_eq!(base.h >= 1.0, base.q >= base.df as f64);

            let ys: Vec<f64> = y.iter().map(|v| v * scale).collect();
            let ss: Vec<f64> = s.iter().map(|v| v * scale).collect();
            let scaled = i2(&ds(&ys, &ss)).unwrap();
            prop_assert!((scaled.q - base.q).abs() <= 1e-9 * base.q.max(1.0));
            prop_assert!((scaled.i2 - base.i2).abs() < 1e-9);
            prop_assert!((scaled.tau2 - base.tau2 * scale * scale).abs() <= 1e-9 * scaled.tau2.max(1e-12));

            let n = y.len();
            let r = rot % n;
            let yr: Vec<f64> = y[r..].iter().chain(&y[..r]).copied().collect();
            let sr: Vec<f64> = s[r..].iter().chain(&s[..r]).copied().collect();
            let q2 = cochran_q(&ds(&yr, &sr)).unwrap();
            prop_assert!((q2.q - base.q).abs() <= 1e-10 * base.q.max(1.0));
        }
    }
}
