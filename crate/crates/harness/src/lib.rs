//! Experiment harness for whitebench: synthetic data, dataset files, sweeps,
//! result CSVs, SVG plots and the property battery behind `verify`.

pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod plot;
pub mod synth;
pub mod verify;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, ResultRow};
