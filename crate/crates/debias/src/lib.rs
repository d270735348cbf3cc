//! Std companion of `debias-core`: rating-file and bundle IO, checkpoints,
//! experiment specs, the grid-search runner, and result tables.

pub mod config;
mod error;
pub mod experiment;
pub mod io;
pub mod method;
pub mod table;

pub use config::ExperimentSpec;
pub use error::{Error, Result};
pub use experiment::{load_dataset, run_experiment, write_run_dir, ExperimentResult};
pub use method::{train_method, Method};
