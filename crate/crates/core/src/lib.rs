//! Physics-informed neural-symbolic modelling of network resilience.

pub mod dataset;
pub mod dynamics;
mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod params;
pub mod physics;
pub mod rng;
pub mod state_encoder;
pub mod synth;
pub mod topo_encoder;
pub mod trainer;

pub use error::{Error, Result};
