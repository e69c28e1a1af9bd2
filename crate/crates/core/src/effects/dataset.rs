use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{MetaError, Result};

/// Effect-size scale shared by every record of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PartialR,
    FisherZ,
    Generic,
}

impl std::str::FromStr for Metric {
    type Err = MetaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partial_r" => Ok(Metric::PartialR),
            "fisher_z" => Ok(Metric::FisherZ),
            "generic" => Ok(Metric::Generic),
            other => Err(MetaError::Domain(format!("unknown metric '{other}'"))),
        }
    }
}

/// One primary-study estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRecord {
    pub effect: f64,
    pub se: f64,
    pub study_id: Option<String>,
    pub n: Option<f64>,
    pub df: Option<f64>,
    /// Values aligned with the owning dataset's moderator schema; `None` is a missing cell.
    pub moderators: Vec<Option<f64>>,
    /// Set when a correlation conversion produced `|r| >= 1`.
    pub out_of_range: bool,
}

impl EffectRecord {
    pub fn new(effect: f64, se: f64) -> Self {
        Self { effect, se, study_id: None, n: None, df: None, moderators: Vec::new(), out_of_range: false }
    }

    pub fn with_study(mut self, id: impl Into<String>) -> Self {
        self.study_id = Some(id.into());
        self
    }

    pub fn with_df(mut self, df: f64) -> Self {
        self.df = Some(df);
        self
    }

    pub fn with_moderators(mut self, values: Vec<f64>) -> Self {
        self.moderators = values.into_iter().map(Some).collect();
        self
    }

    /// `effect / se`.
    pub fn t_value(&self) -> f64 {
        self.effect / self.se
    }
}

/// Validated, immutable collection of effect records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaDataset {
    records: Vec<EffectRecord>,
    metric: Metric,
    moderator_schema: Vec<String>,
    cluster_column: Option<String>,
}

impl MetaDataset {
    pub fn new(
        records: Vec<EffectRecord>,
        metric: Metric,
        moderator_schema: Vec<String>,
        cluster_column: Option<String>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(MetaError::EmptyDataset);
        }
        for (i, name) in moderator_schema.iter().enumerate() {
            if moderator_schema[..i].contains(name) {
                return Err(MetaError::Domain(format!("duplicate moderator column '{name}'")));
            }
        }
        for (i, r) in records.iter().enumerate() {
            let bad = |reason: String| MetaError::InvalidRecord { record: i, reason };
            if !r.effect.is_finite() {
                return Err(bad(format!("effect {} is not finite", r.effect)));
            }
            if !(r.se.is_finite() && r.se > 0.0) {
                return Err(bad(format!("se must be positive and finite, got {}", r.se)));
            }
            if metric == Metric::PartialR && !r.out_of_range && r.effect.abs() >= 1.0 {
                return Err(bad(format!("correlation {} outside (-1, 1)", r.effect)));
            }
            if r.moderators.len() != moderator_schema.len() {
                return Err(bad(format!(
                    "{} moderator values for {} columns",
                    r.moderators.len(),
                    moderator_schema.len()
                )));
            }
            if r.moderators.iter().flatten().any(|v| !v.is_finite()) {
                return Err(bad("non-finite moderator value".into()));
            }
        }
        let flagged = records.iter().filter(|r| r.out_of_range).count();
        if flagged > 0 {
            log::warn!("{flagged} record(s) carry |r| >= 1 from the z/sqrt(n) conversion");
        }
        Ok(Self { records, metric, moderator_schema, cluster_column })
    }

    /// Generic-metric dataset from parallel effect and standard-error slices.
    pub fn from_estimates(effects: &[f64], ses: &[f64]) -> Result<Self> {
        if effects.len() != ses.len() {
            return Err(MetaError::DimensionMismatch(format!(
                "{} effects but {} standard errors",
                effects.len(),
                ses.len()
            )));
        }
        let records = effects.iter().zip(ses).map(|(&y, &s)| EffectRecord::new(y, s)).collect();
        Self::new(records, Metric::Generic, Vec::new(), None)
    }

    /// Generic-metric dataset with named, complete moderator columns.
    pub fn with_moderators(effects: &[f64], ses: &[f64], names: &[&str], columns: &[Vec<f64>]) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(MetaError::DimensionMismatch("moderator names and columns differ in count".into()));
        }
        if effects.len() != ses.len() || columns.iter().any(|c| c.len() != effects.len()) {
            return Err(MetaError::DimensionMismatch("column lengths differ".into()));
        }
        let records = (0..effects.len())
            .map(|i| EffectRecord::new(effects[i], ses[i]).with_moderators(columns.iter().map(|c| c[i]).collect()))
            .collect();
        Self::new(records, Metric::Generic, names.iter().map(|s| s.to_string()).collect(), None)
    }

    pub fn records(&self) -> &[EffectRecord] {
        &self.records
    }

    pub fn k(&self) -> usize {
        self.records.len()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn moderator_schema(&self) -> &[String] {
        &self.moderator_schema
    }

    pub fn cluster_column(&self) -> Option<&str> {
        self.cluster_column.as_deref()
    }

    pub fn effects(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.effect).collect()
    }

    pub fn ses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.se).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.se * r.se).collect()
    }

    /// Inverse-variance weights `1 / S_i^2`.
    pub fn fixed_weights(&self) -> Vec<f64> {
        self.records.iter().map(|r| 1.0 / (r.se * r.se)).collect()
    }

    /// Complete moderator column by name.
    pub fn moderator(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .moderator_schema
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| MetaError::UnknownModerator(name.to_string()))?;
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| r.moderators[j].ok_or_else(|| MetaError::MissingModerator { column: name.to_string(), record: i }))
            .collect()
    }

    /// New dataset holding the records at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let records = idx.iter().map(|&i| self.records[i].clone()).collect();
        Self::new(records, self.metric, self.moderator_schema.clone(), self.cluster_column.clone())
    }
}

/// Records grouped into contiguous per-study blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    data: MetaDataset,
    ids: Vec<String>,
    blocks: Vec<Range<usize>>,
}

impl ClusteredDataset {
    /// Groups by `study_id` in order of first appearance; input order is kept within a cluster.
    pub fn from_dataset(data: &MetaDataset) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut members: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, r) in data.records().iter().enumerate() {
            let id = r.study_id.clone().ok_or_else(|| MetaError::InvalidRecord {
                record: i,
                reason: "missing cluster identifier".into(),
            })?;
            members
                .entry(id.clone())
                .or_insert_with(|| {
                    order.push(id);
                    Vec::new()
                })
                .push(i);
        }
        let mut idx = Vec::with_capacity(data.k());
        let mut blocks = Vec::with_capacity(order.len());
        for id in &order {
            let start = idx.len();
            idx.extend_from_slice(&members[id]);
            blocks.push(start..idx.len());
        }
        Ok(Self { data: data.subset(&idx)?, ids: order, blocks })
    }

    /// Clusters given as (effect, se) lists; ids are the cluster positions.
    pub fn from_groups(groups: &[Vec<(f64, f64)>]) -> Result<Self> {
        let records: Vec<EffectRecord> = groups
            .iter()
            .enumerate()
            .flat_map(|(j, g)| g.iter().map(move |&(y, s)| EffectRecord::new(y, s).with_study(j.to_string())))
            .collect();
        let data = MetaDataset::new(records, Metric::Generic, Vec::new(), Some("study_id".into()))?;
        Self::from_dataset(&data)
    }

    /// Flattened records, clusters contiguous.
    pub fn data(&self) -> &MetaDataset {
        &self.data
    }

    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    pub fn k(&self) -> usize {
        self.data.k()
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.len()).collect()
    }
}
