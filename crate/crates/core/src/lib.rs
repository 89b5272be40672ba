//! Minimax linear estimation of treated-outcome means over a reproducing
//! kernel Hilbert space, with the comparison estimators, simulation
//! designs and diagnostics used to study them.
//!
//! Units with `W = 0` are the ones whose outcomes are observed and weighted;
//! units with `T = 1` form the target population.

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod normal;
pub mod regression;
pub mod simbench;
pub mod solver;

pub use config::{Campaign, RunConfig};
pub use data::{Dataset, TargetRule};
pub use error::{Error, Result};
pub use estimators::{EstimateReport, EstimatorKind, ReportOptions};
pub use kernels::{KernelFamily, KernelSpec};
pub use simbench::{DgpSpec, Family, OutcomeDesign, SimSettings, SimulationSummary};
pub use solver::BalanceWeights;
