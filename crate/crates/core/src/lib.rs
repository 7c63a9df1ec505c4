//! Token-level MDPs, soft-optimal solutions, f-divergence fine-tuning
//! losses and the probes and experiment harness built on top of them.

pub mod divergence;
pub mod error;
pub mod exec;
pub mod harness;
pub mod loss;
pub mod math;
pub mod mdp;
pub mod policy;
pub mod probes;
pub mod soft_rl;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
