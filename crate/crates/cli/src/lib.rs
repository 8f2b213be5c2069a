//! Experiment harness for the direct-path editor: configuration files,
//! synthetic benchmarks, run results and figures.

pub mod bench;
pub mod commands;
pub mod config;
mod error;
pub mod plot;
pub mod results;

pub use bench::{make_benchmark, run_method, Instance, Method, Outcome};
pub use config::{Experiment, ExperimentConfig};
pub use error::{CliError, CliResult};
pub use results::RunResult;
