//! Funnel-family plot data and regression, precision and power based
//! publication-bias estimators.

mod plots;
mod regression;
mod selection;

pub use plots::{funnel_data, galbraith_data, ContourBand, FunnelAxis, FunnelData, GalbraithData, DEFAULT_CONTOURS, GALBRAITH_BENCHMARK};
pub use regression::{
    egger_fat, egger_fat_at, extended_fat_pet, mst, peese, pet, pet_peese, type2_test, BiasRegression, ExtendedFit,
    FatResult, FatSeverity, MstResult, PeeseResult, PetPeese, PetPeeseBranch, Type2Result,
};
pub use selection::{top10, top10_size, waap, SubsetPool, WAAP_POWER_CONSTANT};

use crate::effects::MetaDataset;
use crate::error::Result;

/// Every bias test on one dataset. MST is included when all records carry df.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub alpha: f64,
    pub fat: FatResult,
    pub type2: Type2Result,
    pub peese: PeeseResult,
    pub pet_peese: PetPeese,
    pub mst: Option<MstResult>,
    pub top10: SubsetPool,
    pub waap: SubsetPool,
}

impl BiasReport {
    pub fn pet(&self) -> crate::statkernel::CoefTest {
        self.fat.effect
    }
}

pub fn bias_report(data: &MetaDataset, alpha: f64) -> Result<BiasReport> {
    let mst = if data.records().iter().all(|r| r.df.is_some()) { Some(mst(data)?) } else { None };
    Ok(BiasReport {
        alpha,
        fat: egger_fat_at(data, alpha)?,
        type2: type2_test(data)?,
        peese: peese(data)?,
        pet_peese: pet_peese(data, alpha)?,
        mst,
        top10: top10(data)?,
        waap: waap(data)?,
    })
}
