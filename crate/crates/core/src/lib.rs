//! Causal abstraction networks (CANs) of zero-mean Gaussian structural causal
//! models linked by constructive linear causal abstractions.

pub mod abstraction;
pub mod can_graph;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod search;
pub mod spectral;

pub use error::{CanError, Result};
