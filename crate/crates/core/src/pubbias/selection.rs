use serde::{Deserialize, Serialize};

use crate::effects::MetaDataset;
use crate::error::{MetaError, Result};
use crate::pooling::{pool_fixed, PoolResult};
use crate::uwls::uwls_pool;

/// Power constant for 80% power at a two-sided 5% level, `1.96 + 0.84`.
pub const WAAP_POWER_CONSTANT: f64 = 2.8;

/// A fixed-effect pool over a selected subset of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetPool {
    pub pool: PoolResult,
    /// Indices into the input, ascending.
    pub selected: Vec<usize>,
    /// No record qualified; `pool` is the UWLS fallback over all records.
    pub inadequate_set: bool,
}

/// Fixed-effect pool of the `ceil(k / 10)` most precise records; ties broken
/// by input order.
pub fn top10(data: &MetaDataset) -> Result<SubsetPool> {
    let k = data.k();
    if k == 0 {
        return Err(MetaError::EmptyDataset);
    }
    let n = top10_size(k);
    let mut order: Vec<usize> = (0..k).collect();
    let ses = data.ses();
    // stable sort keeps input order within ties
    order.sort_by(|&a, &b| ses[a].total_cmp(&ses[b]));
    let mut selected = order[..n].to_vec();
    selected.sort_unstable();
    Ok(SubsetPool { pool: pool_fixed(&data.subset(&selected)?)?, selected, inadequate_set: false })
}

pub fn top10_size(k: usize) -> usize {
    k.div_ceil(10)
}

/// Weighted average of the adequately powered records: those with
/// `S_i <= |mu_UWLS| / 2.8`.
pub fn waap(data: &MetaDataset) -> Result<SubsetPool> {
    let k = data.k();
    if k == 0 {
        return Err(MetaError::EmptyDataset);
    }
    let first: PoolResult = if k >= 2 {
        uwls_pool(data)?.as_pool().expect("pooled UWLS")
    } else {
        pool_fixed(data)?
    };
    let threshold = first.mu_hat.abs() / WAAP_POWER_CONSTANT;
    let selected: Vec<usize> = data.records().iter().enumerate().filter(|(_, r)| r.se <= threshold).map(|(i, _)| i).collect();
    if selected.is_empty() {
        log::warn!("no adequately powered records; WAAP falls back to UWLS");
        return Ok(SubsetPool { pool: first, selected, inadequate_set: true });
    }
    Ok(SubsetPool { pool: pool_fixed(&data.subset(&selected)?)?, selected, inadequate_set: false })
}
