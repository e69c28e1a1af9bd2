use serde::{Deserialize, Serialize};

use crate::effects::MetaDataset;
use crate::error::{MetaError, Result};
use crate::pooling::pool_fixed;
use crate::statkernel::norm_quantile;

/// Default significance contours for contour-enhanced funnels.
pub const DEFAULT_CONTOURS: [f64; 3] = [0.10, 0.05, 0.01];
const CONTOUR_POINTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunnelAxis {
    Se,
    Variance,
    Precision,
    InvVariance,
}

impl FunnelAxis {
    pub fn value(self, se: f64) -> f64 {
        match self {
            FunnelAxis::Se => se,
            FunnelAxis::Variance => se * se,
            FunnelAxis::Precision => 1.0 / se,
            FunnelAxis::InvVariance => 1.0 / (se * se),
        }
    }
}

impl std::str::FromStr for FunnelAxis {
    type Err = MetaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se" => Ok(FunnelAxis::Se),
            "variance" => Ok(FunnelAxis::Variance),
            "precision" => Ok(FunnelAxis::Precision),
            "inv_variance" => Ok(FunnelAxis::InvVariance),
            other => Err(MetaError::Domain(format!("unknown funnel axis '{other}'"))),
        }
    }
}

/// Boundary `effect = +-z_{alpha/2} se` sampled on the observed se range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourBand {
    pub level: f64,
    pub z: f64,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelData {
    /// `(effect, axis value)` in input order.
    pub points: Vec<(f64, f64)>,
    pub axis: FunnelAxis,
    pub reference_line: f64,
    pub contour_bands: Option<Vec<ContourBand>>,
}

pub fn funnel_data(data: &MetaDataset, axis: FunnelAxis, contour_levels: Option<&[f64]>) -> Result<FunnelData> {
    if data.k() == 0 {
        return Err(MetaError::EmptyDataset);
    }
    let points = data.records().iter().map(|r| (r.effect, axis.value(r.se))).collect();
    let reference_line = pool_fixed(data)?.mu_hat;
    let contour_bands = match contour_levels {
        None => None,
        Some(levels) => {
            let ses = data.ses();
            let lo = ses.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ses.iter().copied().fold(0.0, f64::max);
            let n = if hi > lo { CONTOUR_POINTS } else { 1 };
            let grid: Vec<f64> =
                (0..n).map(|i| if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect();
            let mut bands = Vec::with_capacity(levels.len());
            for &level in levels {
                if !(level > 0.0 && level < 1.0) {
                    return Err(MetaError::Domain(format!("contour level {level} outside (0, 1)")));
                }
                let z = norm_quantile(1.0 - level / 2.0)?;
                bands.push(ContourBand {
                    level,
                    z,
                    se: grid.clone(),
                    lower: grid.iter().map(|s| -z * s).collect(),
                    upper: grid.iter().map(|s| z * s).collect(),
                });
            }
            Some(bands)
        }
    };
    Ok(FunnelData { points, axis, reference_line, contour_bands })
}

/// Share of standardized effects expected outside +-2 without selection.
pub const GALBRAITH_BENCHMARK: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalbraithData {
    /// `(1/S_i, (y_i - mu)/S_i)` in input order.
    pub points: Vec<(f64, f64)>,
    pub mu: f64,
    pub fraction_outside: f64,
    pub benchmark: f64,
}

pub fn galbraith_data(data: &MetaDataset, mu: f64) -> Result<GalbraithData> {
    if data.k() == 0 {
        return Err(MetaError::EmptyDataset);
    }
    let points: Vec<(f64, f64)> = data.records().iter().map(|r| (1.0 / r.se, (r.effect - mu) / r.se)).collect();
    let outside = points.iter().filter(|p| p.1.abs() > 2.0).count();
    Ok(GalbraithData {
        fraction_outside: outside as f64 / points.len() as f64,
        points,
        mu,
        benchmark: GALBRAITH_BENCHMARK,
    })
}
