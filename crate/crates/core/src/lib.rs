//! Islanded microgrid modelling with droop-controlled grid-forming
//! inverters, capacity-aware supplementary regulators, and three analysis
//! engines: static equilibrium and feasibility, small-signal eigenanalysis,
//! and fixed-step time-domain simulation.

pub mod equilibrium;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod grid;
pub mod inverter;
pub mod output;
pub mod regulators;
pub mod scenario;
pub mod smallsignal;
pub mod system;
pub mod tds;

pub use error::{Error, Result};
