use super::report::format_number;
use crate::effects::MetaDataset;
use crate::error::{MetaError, Result};
use crate::heterogeneity::tau2_dl;
use crate::pooling::{ci_standard, pool_fixed, pool_random, z_crit, DfRule, PoolModel};
use crate::pubbias::{funnel_data, galbraith_data, FunnelAxis, DEFAULT_CONTOURS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Forest,
    Funnel,
    Contour,
    Galbraith,
}

impl std::str::FromStr for PlotKind {
    type Err = MetaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forest" => Ok(PlotKind::Forest),
            "funnel" => Ok(PlotKind::Funnel),
            "contour" => Ok(PlotKind::Contour),
            "galbraith" => Ok(PlotKind::Galbraith),
            other => Err(MetaError::Usage(format!("unknown plot kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOptions {
    /// Level of the per-record and pooled intervals of a forest plot.
    pub level: f64,
    /// Weights shown in a forest plot.
    pub model: PoolModel,
    pub axis: FunnelAxis,
    /// Significance levels of the contour bands.
    pub contour_levels: Vec<f64>,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self { level: 0.95, model: PoolModel::Random, axis: FunnelAxis::Se, contour_levels: DEFAULT_CONTOURS.to_vec() }
    }
}

fn row(out: &mut String, cells: &[String]) {
    out.push_str(&cells.join("\t"));
    out.push('\n');
}

/// Tab-separated plot coordinates with a header row.
///
/// * forest: `label effect lo hi weight_pct`, studies then a `pooled` row
/// * funnel: `effect axis_value`
/// * contour: `series effect axis_value`; series is `study`, or `lower_<level>`/`upper_<level>` for bands
/// * galbraith: `precision standardized_effect`, standardized about the fixed-effect mean
pub fn emit_plot_data(kind: PlotKind, data: &MetaDataset, opts: &PlotOptions) -> Result<String> {
    if data.k() == 0 {
        return Err(MetaError::EmptyDataset);
    }
    let f = format_number;
    let mut out = String::new();
    match kind {
        PlotKind::Forest => {
            let z = z_crit(opts.level)?;
            let pooled = match opts.model {
                PoolModel::Fixed => pool_fixed(data)?,
                // a single record has no between-study variance to estimate
                PoolModel::Random if data.k() < 2 => pool_fixed(data)?,
                PoolModel::Random => pool_random(data, tau2_dl(data)?)?,
            };
            let total: f64 = pooled.weights.iter().sum();
            row(&mut out, &["label", "effect", "lo", "hi", "weight_pct"].map(String::from));
            for (i, (r, w)) in data.records().iter().zip(&pooled.weights).enumerate() {
                let label = r.study_id.clone().unwrap_or_else(|| format!("study_{}", i + 1));
                row(&mut out, &[label, f(r.effect), f(r.effect - z * r.se), f(r.effect + z * r.se), f(100.0 * w / total)]);
            }
            let ci = ci_standard(&pooled, opts.level, DfRule::Z)?;
            row(&mut out, &["pooled".into(), f(pooled.mu_hat), f(ci.lo), f(ci.hi), f(100.0)]);
        }
        PlotKind::Funnel => {
            let fd = funnel_data(data, opts.axis, None)?;
            row(&mut out, &["effect".into(), "axis_value".into()]);
            for (e, a) in fd.points {
                row(&mut out, &[f(e), f(a)]);
            }
        }
        PlotKind::Contour => {
            let fd = funnel_data(data, opts.axis, Some(&opts.contour_levels))?;
            row(&mut out, &["series", "effect", "axis_value"].map(String::from));
            for (e, a) in &fd.points {
                row(&mut out, &["study".into(), f(*e), f(*a)]);
            }
            for band in fd.contour_bands.unwrap_or_default() {
                let tag = format_number(band.level);
                for (side, values) in [("lower", &band.lower), ("upper", &band.upper)] {
                    for (s, e) in band.se.iter().zip(values) {
                        row(&mut out, &[format!("{side}_{tag}"), f(*e), f(opts.axis.value(*s))]);
                    }
                }
            }
        }
        PlotKind::Galbraith => {
            let mu = pool_fixed(data)?.mu_hat;
            row(&mut out, &["precision".into(), "standardized_effect".into()]);
            for (p, s) in galbraith_data(data, mu)?.points {
                row(&mut out, &[f(p), f(s)]);
            }
        }
    }
    Ok(out)
}
