//! Slotted simulation engine, configuration, trace IO and metrics for the
//! `madvm-core` controllers. The `madvm` binary wraps this as a CLI.

pub mod config;
pub mod engine;
pub mod metrics;
pub mod trace;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    /// Bad configuration, trace or arguments (CLI exit code 1).
    #[error("{0}")]
    Input(String),
    /// A controller or the engine broke a hard invariant (CLI exit code 2).
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl From<madvm_core::Error> for SimError {
    fn from(e: madvm_core::Error) -> Self {
        SimError::Input(e.to_string())
    }
}

pub type Result<T> = core::result::Result<T, SimError>;
