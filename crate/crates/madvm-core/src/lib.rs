//! Energy-aware dynamic VM placement on a slotted schedule.
//!
//! The crate models per-VM CPU demand as finite Markov chains, evaluates
//! data-center power/shortage cost, solves the joint average-cost MDP
//! exactly on tiny instances (relative value iteration), and implements
//! the MadVM approximate controller: per-VM value iteration over key
//! states, a linear utility decomposition and an auction over control
//! utilities that picks at most `T_m` migrations per slot.
//!
//! The crate is `no_std` (with `alloc`); all IO, configuration and the
//! simulation engine live in the companion `madvm-sim` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod baselines;
pub mod cluster;
pub mod demand;
pub mod error;
pub mod exact_mdp;
pub mod madvm;

mod linalg;

pub use error::{Error, Result};
