//! Monte Carlo data generation and replication harness.
//!
//! Every replication draws from its own ChaCha stream keyed by
//! `(master_seed, rep_index)`, so results do not depend on how replications
//! are scheduled across threads.

mod experiment;

pub use experiment::{coverage_experiment, run_replications, thread_count, CoverageRow, MethodDescriptor, THREADS_ENV};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::effects::{ClusteredDataset, EffectRecord, MetaDataset, Metric};
use crate::error::{MetaError, Result};
use crate::statkernel::norm_quantile;

/// Distribution of standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SeLaw {
    /// Cycled through in record order.
    Fixed { values: Vec<f64> },
    Uniform { low: f64, high: f64 },
}

/// Which drawn records are published.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Selection {
    #[default]
    None,
    /// Kept only when `t >= z_{1 - alpha/2}`: positive and significant.
    OneSidedSig { alpha: f64 },
    /// Kept only when `t > 0`.
    Directional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterLaw {
    pub m: usize,
    pub k_min: usize,
    pub k_max: usize,
}

/// Linear moderator `x ~ U(low, high)` shifting the true effect by `beta x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeratorLaw {
    pub beta: f64,
    #[serde(default)]
    pub low: f64,
    #[serde(default = "one")]
    pub high: f64,
}

fn one() -> f64 {
    1.0
}

fn default_reps() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    /// Number of independent studies; exclusive with `clusters`.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub clusters: Option<ClusterLaw>,
    pub mu: f64,
    #[serde(default)]
    pub tau2: f64,
    /// Within-cluster heterogeneity; clustered scenarios only.
    #[serde(default)]
    pub omega2: f64,
    pub se_law: SeLaw,
    #[serde(default)]
    pub selection: Selection,
    /// Probability that a record is subject to selection at all.
    #[serde(default = "one")]
    pub eligible: f64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub moderator: Option<ModeratorLaw>,
    /// Correlation of sampling errors within a cluster.
    #[serde(default)]
    pub sampling_rho: f64,
}

impl SimScenario {
    /// Independent studies with no selection.
    pub fn flat(k: usize, mu: f64, tau2: f64, se_law: SeLaw) -> Self {
        Self {
            k: Some(k),
            clusters: None,
            mu,
            tau2,
            omega2: 0.0,
            se_law,
            selection: Selection::None,
            eligible: 1.0,
            reps: default_reps(),
            master_seed: 0,
            moderator: None,
            sampling_rho: 0.0,
        }
    }

    pub fn clustered(law: ClusterLaw, mu: f64, tau2: f64, omega2: f64, se_law: SeLaw) -> Self {
        Self { k: None, clusters: Some(law), omega2, ..Self::flat(0, mu, tau2, se_law) }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let sc: Self = serde_json::from_str(text).map_err(|e| MetaError::Domain(format!("scenario: {e}")))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MetaError::Domain(format!("scenario: {m}")));
        match (self.k, self.clusters) {
            (Some(_), Some(_)) | (None, None) => return bad("give exactly one of `k` and `clusters`"),
            (Some(0), None) => return bad("k must be positive"),
            (None, Some(c)) if c.m == 0 || c.k_min == 0 || c.k_min > c.k_max => {
                return bad("clusters need m >= 1 and 1 <= k_min <= k_max")
            }
            _ => {}
        }
        if self.reps == 0 {
            return bad("reps must be at least 1");
        }
        if !(self.tau2 >= 0.0 && self.omega2 >= 0.0) {
            return bad("variance parameters must be nonnegative");
        }
        if self.k.is_some() && self.omega2 != 0.0 {
            return bad("omega2 needs a clustered layout");
        }
        if !(0.0..=1.0).contains(&self.sampling_rho) || !(0.0..=1.0).contains(&self.eligible) {
            return bad("sampling_rho and eligible must lie in [0, 1]");
        }
        if self.clusters.is_some() && self.selection != Selection::None {
            return bad("selection applies to flat layouts only");
        }
        if let Selection::OneSidedSig { alpha } = self.selection {
            if !(alpha > 0.0 && alpha < 1.0) {
                return bad("selection alpha must lie in (0, 1)");
            }
        }
        match &self.se_law {
            SeLaw::Fixed { values } if values.is_empty() || values.iter().any(|s| !(*s > 0.0 && s.is_finite())) => {
                bad("fixed se values must be positive")
            }
            SeLaw::Uniform { low, high } if !(*low > 0.0 && high >= low && high.is_finite()) => {
                bad("uniform se law needs 0 < low <= high")
            }
            _ => Ok(()),
        }
    }
}

/// One simulated replication.
#[derive(Debug, Clone, PartialEq)]
pub enum SimData {
    Flat(MetaDataset),
    Clustered(ClusteredDataset),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub data: SimData,
    /// Draws discarded by the selection rule.
    pub censored: usize,
    /// True effect of each kept record, in record order.
    pub true_effects: Vec<f64>,
    /// A fresh true effect `mu + u`, independent of the data.
    pub fresh_effect: f64,
    pub rep_index: usize,
}

impl SimDataset {
    pub fn flat(&self) -> &MetaDataset {
        match &self.data {
            SimData::Flat(d) => d,
            SimData::Clustered(c) => c.data(),
        }
    }

    pub fn clustered(&self) -> Option<&ClusteredDataset> {
        match &self.data {
            SimData::Clustered(c) => Some(c),
            SimData::Flat(_) => None,
        }
    }
}

const STREAM_DATA: u64 = 0;
const STREAM_FRESH: u64 = 1;
/// Attempts allowed per kept record before selection is deemed too strict.
const MAX_ATTEMPTS_PER_RECORD: usize = 10_000;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `(master_seed, rep_index, stream)`.
pub fn rep_rng(master_seed: u64, rep_index: usize, stream: u64) -> ChaCha8Rng {
    let key = splitmix64(master_seed ^ splitmix64(rep_index as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn draw_se(law: &SeLaw, i: usize, rng: &mut ChaCha8Rng) -> f64 {
    match law {
        SeLaw::Fixed { values } => values[i % values.len()],
        SeLaw::Uniform { low, high } => {
            if low == high {
                *low
            } else {
                rng.random_range(*low..*high)
            }
        }
    }
}

fn survives(sel: Selection, t: f64, crit: f64) -> bool {
    match sel {
        Selection::None => true,
        Selection::OneSidedSig { .. } => t >= crit,
        Selection::Directional => t > 0.0,
    }
}

/// Draws replication `rep_index` of the scenario.
pub fn simulate_dataset(sc: &SimScenario, rep_index: usize) -> Result<SimDataset> {
    sc.validate()?;
    let mut rng = rep_rng(sc.master_seed, rep_index, STREAM_DATA);
    let mut fresh_rng = rep_rng(sc.master_seed, rep_index, STREAM_FRESH);
    let fresh_effect = sc.mu + sc.tau2.sqrt() * normal(&mut fresh_rng);
    let tau = sc.tau2.sqrt();
    let names: Vec<String> = if sc.moderator.is_some() { vec!["x".into()] } else { vec![] };
    let draw_x = |rng: &mut ChaCha8Rng| -> Option<f64> {
        sc.moderator.map(|m| if m.low == m.high { m.low } else { rng.random_range(m.low..m.high) })
    };
    let shift = |x: Option<f64>| sc.moderator.map_or(0.0, |m| m.beta * x.unwrap_or(0.0));

    if let Some(k) = sc.k {
        let crit = match sc.selection {
            Selection::OneSidedSig { alpha } => norm_quantile(1.0 - alpha / 2.0)?,
            _ => 0.0,
        };
        let mut records = Vec::with_capacity(k);
        let mut true_effects = Vec::with_capacity(k);
        let mut censored = 0;
        while records.len() < k {
            if censored > MAX_ATTEMPTS_PER_RECORD * k {
                return Err(MetaError::Domain("selection rule keeps too few draws".into()));
            }
            let s = draw_se(&sc.se_law, records.len(), &mut rng);
            let x = draw_x(&mut rng);
            let theta = sc.mu + shift(x) + tau * normal(&mut rng);
            let y = theta + s * normal(&mut rng);
            let eligible = sc.eligible >= 1.0 || rng.random::<f64>() < sc.eligible;
            if eligible && !survives(sc.selection, y / s, crit) {
                censored += 1;
                continue;
            }
            let mut r = EffectRecord::new(y, s);
            if let Some(x) = x {
                r = r.with_moderators(vec![x]);
            }
            records.push(r);
            true_effects.push(theta);
        }
        if censored > 0 {
            log::debug!("replication {rep_index}: {censored} draws censored");
        }
        let data = MetaDataset::new(records, Metric::Generic, names, None)?;
        return Ok(SimDataset { data: SimData::Flat(data), censored, true_effects, fresh_effect, rep_index });
    }

    let law = sc.clusters.expect("validated layout");
    let omega = sc.omega2.sqrt();
    let (r_common, r_own) = (sc.sampling_rho.sqrt(), (1.0 - sc.sampling_rho).sqrt());
    let mut records = Vec::new();
    let mut true_effects = Vec::new();
    for j in 0..law.m {
        let kj = if law.k_min == law.k_max { law.k_min } else { rng.random_range(law.k_min..=law.k_max) };
        let study = sc.mu + tau * normal(&mut rng);
        let common = normal(&mut rng);
        for _ in 0..kj {
            let s = draw_se(&sc.se_law, records.len(), &mut rng);
            let x = draw_x(&mut rng);
            let theta = study + shift(x) + omega * normal(&mut rng);
            let e = s * (r_common * common + r_own * normal(&mut rng));
            let mut r = EffectRecord::new(theta + e, s).with_study(format!("s{j}"));
            if let Some(x) = x {
                r = r.with_moderators(vec![x]);
            }
            records.push(r);
            true_effects.push(theta);
        }
    }
    let data = MetaDataset::new(records, Metric::Generic, names, Some("study_id".into()))?;
    Ok(SimDataset {
        data: SimData::Clustered(ClusteredDataset::from_dataset(&data)?),
        censored: 0,
        true_effects,
        fresh_effect,
        rep_index,
    })
}
