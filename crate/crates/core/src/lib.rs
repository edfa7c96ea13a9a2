//! Spiking-transformer engine with spatio-temporal token halting.
//!
//! The crate builds a small spiking vision transformer whose tokens can halt
//! independently across both encoder blocks and timesteps, together with the
//! training objectives, energy accounting and analysis tooling needed to
//! study that behavior on a single CPU.

pub mod analysis;
pub mod block;
pub mod checkpoint;
pub mod data;
pub mod embed;
pub mod energy;
pub mod error;
pub mod halting;
pub mod layers;
pub mod loss;
pub mod model;
pub mod neuron;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
