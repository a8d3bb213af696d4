//! Simulation-based power analysis for crossed participant × item
//! reaction-time designs, with a linear mixed-model fitter and
//! individual-differences diagnostics.

pub mod error;
pub mod io;
pub mod lmm;
pub mod power;
pub mod rng;
pub mod scenarios;
pub mod simulate;
pub mod special;
pub mod stats;
pub mod types;
pub mod variability;

pub use error::{Error, Result};
pub use types::*;
