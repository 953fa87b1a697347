pub mod approximator;
pub mod attacker;
pub mod codec;
pub mod divergence;
pub mod error;
pub mod gridworld;
pub mod harness;
pub mod metrics;
pub mod victim;

pub use error::{Error, Result};
