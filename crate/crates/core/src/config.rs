use serde::{Deserialize, Serialize};

use crate::coding::{self, CodingParams};
use crate::error::{Error, Result};
use crate::interference::InterfererField;
use crate::metrics::EnergyParams;
use crate::phy::PhyParams;
use crate::protocol::Scheme;
use crate::scheduler::SlotPlanParams;

/// Per-device processing delay, drawn uniformly from `min..=max` superslots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaRange {
    pub min: u32,
    pub max: u32,
}

impl Default for LambdaRange {
    fn default() -> Self {
        Self { min: 1, max: 1 }
    }
}

/// Every tunable of one simulated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub scheme: Scheme,
    pub n_ed: u32,
    pub cell_radius_m: f64,
    pub replications: u32,
    pub seed: u64,
    pub bin_width_m: f64,
    pub lambda: LambdaRange,
    pub phy: PhyParams,
    pub slots: SlotPlanParams,
    pub coding: CodingParams,
    pub interference: InterfererField,
    pub energy: EnergyParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::D2d,
            n_ed: 400,
            cell_radius_m: 1000.0,
            replications: 100,
            seed: 1,
            bin_width_m: 100.0,
            lambda: LambdaRange::default(),
            phy: PhyParams::default(),
            slots: SlotPlanParams::default(),
            coding: CodingParams::default(),
            interference: InterfererField::default(),
            energy: EnergyParams::default(),
        }
    }
}

impl SimConfig {
    /// The batched-delivery scenario: five batches, 8 dB shadowing and the
    /// per-batch D2D bounds.
    pub fn batched() -> Self {
        let mut cfg = Self::default();
        cfg.coding.batches = 5;
        cfg.phy.shadow_sigma_db = 8.0;
        cfg
    }

    pub fn source_fragments(&self) -> u32 {
        self.coding.source_fragments(self.slots.fragment_bytes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ed == 0 {
            return Err(Error::config("n_ed", "must be >= 1"));
        }
        if !(self.cell_radius_m > 0.0) {
            return Err(Error::config("cell_radius_m", "must be > 0"));
        }
        if self.replications == 0 {
            return Err(Error::config("replications", "must be >= 1"));
        }
        if !(self.bin_width_m > 0.0) {
            return Err(Error::config("bin_width_m", "must be > 0"));
        }
        if self.lambda.min == 0 || self.lambda.min > self.lambda.max {
            return Err(Error::config("lambda", "need 1 <= min <= max"));
        }
        if let Scheme::Fsf(sf) = self.scheme {
            crate::phy::sf_index(sf).map_err(|_| Error::config("scheme", "fsf SF must be 7..=12"))?;
        }
        self.phy.validate()?;
        self.slots.validate()?;
        self.coding.validate(self.slots.fragment_bytes)?;
        self.interference.validate()?;
        self.energy.validate()?;
        let cap = coding::max_supported_eds(&self.coding);
        if self.n_ed > cap {
            return Err(Error::config(
                "n_ed",
                format!("{} exceeds the {cap} EDs the sequence-number space supports", self.n_ed),
            ));
        }
        Ok(())
    }
}
