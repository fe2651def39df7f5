use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors surfaced by the core algorithms.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Malformed input (invalid distribution, out-of-range index, ...).
    Input(String),
    /// A migration plan violates the per-slot cap `T_m`.
    MigrationCap { moved: usize, cap: usize },
    /// The joint state space is too large for the exact oracle.
    BudgetExceeded { states: u128, budget: u128 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Input(msg) => write!(f, "invalid input: {msg}"),
            Error::MigrationCap { moved, cap } => {
                write!(f, "migration plan moves {moved} VMs, cap is {cap}")
            }
            Error::BudgetExceeded { states, budget } => {
                write!(f, "joint state space has {states} states, oracle budget is {budget}")
            }
        }
    }
}

impl core::error::Error for Error {}
