//! Meta-analysis and meta-regression toolkit.
//!
//! Fixed and random-effects pooling, heterogeneity measures, mixed-effects
//! meta-regression with moment, ML and REML variance estimators, the
//! FAT/PET/PEESE publication-bias battery, unrestricted weighted least
//! squares, robust variance estimation for dependent effects, three-level
//! models, and a Monte Carlo harness for checking coverage claims.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod effects;
pub mod error;
pub mod heterogeneity;
pub mod iocli;
pub mod metareg;
pub mod multilevel;
pub mod pooling;
pub mod pubbias;
pub mod rve;
pub mod simlab;
pub mod statkernel;
pub mod uwls;

pub use error::{MetaError, Result};
