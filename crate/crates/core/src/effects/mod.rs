//! Effect-size construction and the validated dataset types every analysis consumes.

mod dataset;
mod transform;

pub use dataset::{ClusteredDataset, EffectRecord, MetaDataset, Metric};
pub use transform::{fisher_z, fisher_z_inverse, fisher_z_variance, partial_correlation, partial_correlation_from_z};
