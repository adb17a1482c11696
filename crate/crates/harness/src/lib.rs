//! Experiment runner for the fusion models: config resolution, seeded
//! training, fusion comparisons and plot output. The `fusionlab` binary is a
//! thin CLI over this library.

pub mod compare;
pub mod config;
pub mod error;
pub mod optim;
pub mod plot;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
