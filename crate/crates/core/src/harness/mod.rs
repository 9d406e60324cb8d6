//! Configuration, model evaluation, table cache, validation runs and case
//! studies.

pub mod cache;
pub mod cases;
pub mod config;
pub mod model;
pub mod validation;

use serde::{Deserialize, Serialize};

use crate::simulator::{BondMode, SimCounts};

pub use cache::LutCache;
pub use config::ProcessConfig;
pub use model::{run_model, ModelResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Model,
    Simulation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YieldReport {
    pub mode: BondMode,
    pub source: Source,
    pub y_ovl: f64,
    pub y_cr: f64,
    pub y_df: f64,
    pub y_total: f64,
    pub runtime_s: f64,
    pub seed: Option<u64>,
    /// Wafers (W2W) or dies (D2W) simulated.
    pub samples: Option<usize>,
    /// Dies evaluated.
    pub dies: Option<u64>,
    pub cv: Option<f64>,
}

impl YieldReport {
    pub fn from_counts(mode: BondMode, counts: &SimCounts, seed: u64, samples: usize, cv: Option<f64>, runtime_s: f64) -> Self {
        Self {
            mode,
            source: Source::Simulation,
            y_ovl: counts.y_ovl(),
            y_cr: counts.y_cr(),
            y_df: counts.y_df(),
            y_total: counts.y_total(),
            runtime_s,
            seed: Some(seed),
            samples: Some(samples),
            dies: Some(counts.dies),
            cv,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
