pub mod error;
pub mod layout;
pub mod morphology;
pub mod defect;
pub mod overlay;
pub mod recess;
pub mod simulator;
pub mod harness;

pub use error::{Result, YieldError};
