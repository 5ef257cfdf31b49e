//! Deterministic discrete-event simulation of a serving cluster.
//!
//! A run is a pure function of (config, seed): the workload is sampled up
//! front ([`workload`]), the event loop itself draws no randomness, and all
//! iteration happens over ordered containers, so two runs of the same
//! config produce byte-identical CSV outputs.

pub mod driver;
pub mod metrics;
pub mod workload;

pub use driver::{run_simulation, run_with_workload, FailureReport, PoolAudit, SimReport};

use std::path::PathBuf;

use crate::config::ConfigError;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot read trace {path}: {source}")]
    TraceIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    TraceParse { path: PathBuf, line: usize, message: String },
    #[error("workload produces a {len}-token prompt exceeding model.context_window = {window}")]
    PromptTooLong { len: usize, window: usize },
    #[error("simulation stalled at t={now} with {pending} unfinished requests")]
    DeadlockDetected { now: f64, pending: usize },
}
