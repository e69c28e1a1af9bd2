use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{simulate_dataset, SimDataset, SimScenario};
use crate::error::{MetaError, Result};
use crate::heterogeneity::tau2_dl;
use crate::pooling::{ci_hksj, ci_standard, pool_fixed, pool_random, prediction_interval, DfRule, Interval};
use crate::uwls::uwls_pool;

/// Caps the worker count; unset or unparsable means one per core.
pub const THREADS_ENV: &str = "METAFORGE_THREADS";

pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` on every replication and returns the results in replication order.
pub fn run_replications<T, F>(sc: &SimScenario, f: F) -> Result<Vec<Result<T>>>
where
    T: Send,
    F: Fn(&SimDataset) -> Result<T> + Sync,
{
    sc.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| MetaError::Domain(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        (0..sc.reps).into_par_iter().map(|r| simulate_dataset(sc, r).and_then(|d| f(&d))).collect()
    }))
}

/// Interval procedures compared by [`coverage_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodDescriptor {
    FixedZ,
    /// DerSimonian-Laird weights with a normal or t reference.
    RandomWald(DfRule),
    Hksj,
    HksjMod,
    /// Scored against the fresh true effect, not `mu`.
    Prediction,
    Uwls,
}

impl std::str::FromStr for MethodDescriptor {
    type Err = MetaError;
    /// Inverse of [`MethodDescriptor::label`].
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "fixed_z" => MethodDescriptor::FixedZ,
            "random_z" => MethodDescriptor::RandomWald(DfRule::Z),
            "random_t_k1" => MethodDescriptor::RandomWald(DfRule::KMinus1),
            "random_t_k2" => MethodDescriptor::RandomWald(DfRule::KMinus2),
            "random_t_k4" => MethodDescriptor::RandomWald(DfRule::KMinus4),
            "hksj" => MethodDescriptor::Hksj,
            "hksj_mod" => MethodDescriptor::HksjMod,
            "prediction" => MethodDescriptor::Prediction,
            "uwls" => MethodDescriptor::Uwls,
            other => return Err(MetaError::Usage(format!("unknown method '{other}'"))),
        })
    }
}

impl MethodDescriptor {
    pub fn label(&self) -> String {
        match self {
            MethodDescriptor::FixedZ => "fixed_z".into(),
            MethodDescriptor::RandomWald(DfRule::Z) => "random_z".into(),
            MethodDescriptor::RandomWald(DfRule::KMinus1) => "random_t_k1".into(),
            MethodDescriptor::RandomWald(DfRule::KMinus2) => "random_t_k2".into(),
            MethodDescriptor::RandomWald(DfRule::KMinus4) => "random_t_k4".into(),
            MethodDescriptor::Hksj => "hksj".into(),
            MethodDescriptor::HksjMod => "hksj_mod".into(),
            MethodDescriptor::Prediction => "prediction".into(),
            MethodDescriptor::Uwls => "uwls".into(),
        }
    }

    pub fn interval(&self, sim: &SimDataset, level: f64) -> Result<Interval> {
        let data = sim.flat();
        match self {
            MethodDescriptor::FixedZ => ci_standard(&pool_fixed(data)?, level, DfRule::Z),
            MethodDescriptor::RandomWald(rule) => ci_standard(&pool_random(data, tau2_dl(data)?)?, level, *rule),
            MethodDescriptor::Hksj | MethodDescriptor::HksjMod => {
                let fit = pool_random(data, tau2_dl(data)?)?;
                ci_hksj(data, &fit, level, *self == MethodDescriptor::HksjMod)
            }
            MethodDescriptor::Prediction => prediction_interval(&pool_random(data, tau2_dl(data)?)?, level),
            MethodDescriptor::Uwls => uwls_pool(data)?.interval(0, level),
        }
    }

    fn target(&self, sc: &SimScenario, sim: &SimDataset) -> f64 {
        match self {
            MethodDescriptor::Prediction => sim.fresh_effect,
            _ => sc.mu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub method: String,
    pub coverage: f64,
    /// Binomial standard error of `coverage`.
    pub mc_se: f64,
    pub mean_width: f64,
    /// Share of intervals excluding zero.
    pub rejection_rate: f64,
    /// Replications on which the method errored; excluded from the rates.
    pub failures: usize,
    pub reps: usize,
}

/// Empirical coverage of each method over the scenario's replications.
pub fn coverage_experiment(sc: &SimScenario, methods: &[MethodDescriptor], level: f64) -> Result<Vec<CoverageRow>> {
    let per_rep = run_replications(sc, |sim| {
        Ok(methods
            .iter()
            .map(|m| m.interval(sim, level).map(|iv| (iv.contains(m.target(sc, sim)), iv.width(), !iv.contains(0.0))))
            .collect::<Vec<_>>())
    })?;
    let mut rows = Vec::with_capacity(methods.len());
    for (j, m) in methods.iter().enumerate() {
        let (mut hits, mut width, mut rejections, mut ok, mut failures) = (0usize, 0.0, 0usize, 0usize, 0usize);
        for rep in &per_rep {
            match rep {
                Ok(v) => match &v[j] {
                    Ok((covered, w, rejected)) => {
                        ok += 1;
                        hits += *covered as usize;
                        rejections += *rejected as usize;
                        width += w;
                    }
                    Err(e) if e.is_numerical() => failures += 1,
                    Err(e) => return Err(e.clone()),
                },
                Err(e) => return Err(e.clone()),
            }
        }
        if ok == 0 {
            return Err(MetaError::NonConvergence { evaluations: failures });
        }
        let n = ok as f64;
        let p = hits as f64 / n;
        rows.push(CoverageRow {
            method: m.label(),
            coverage: p,
            mc_se: (p * (1.0 - p) / n).sqrt(),
            mean_width: width / n,
            rejection_rate: rejections as f64 / n,
            failures,
            reps: sc.reps,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simlab::SeLaw;

    #[test]
    fn order_independent_of_threads() {
        let mut sc = SimScenario::flat(6, 0.1, 0.05, SeLaw::Uniform { low: 0.1, high: 0.3 });
        sc.reps = 64;
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial: Vec<Vec<f64>> = pool1.install(|| {
            (0..sc.reps).into_par_iter().map(|r| simulate_dataset(&sc, r).unwrap().flat().effects()).collect()
        });
        let parallel: Vec<Vec<f64>> =
            run_replications(&sc, |d| Ok(d.flat().effects())).unwrap().into_iter().map(|r| r.unwrap()).collect();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn coverage_table_shape() {
        let mut sc = SimScenario::flat(10, 0.0, 0.0, SeLaw::Uniform { low: 0.1, high: 0.3 });
        sc.reps = 200;
        let rows = coverage_experiment(&sc, &[MethodDescriptor::FixedZ, MethodDescriptor::Hksj], 0.95).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!(r.coverage > 0.85 && r.coverage <= 1.0);
            assert!((r.coverage + r.rejection_rate - 1.0).abs() < 1e-12);
            assert!(r.mean_width > 0.0);
        }
        assert_eq!(rows[0].method, "fixed_z");
    }
}
