//! Monte Carlo toolkit for McKean-Vlasov SDEs driven by subordinated
//! Brownian motion (rotationally symmetric alpha-stable noise).

pub mod coefficients;
pub mod appendix_limits;
pub mod counterexample;
pub mod error;
pub mod exec;
pub mod grid;
pub mod kernel_checks;
pub mod measure;
pub mod rng;
pub mod solver;
pub mod stable_paths;
pub mod stats;

pub use error::{Error, Result};
pub use exec::Execution;
pub use grid::TimeGrid;
pub use measure::{EmpiricalMeasure, MeasureFlow};
pub use rng::{Domain, RngKey};
pub use stable_paths::StableParams;
