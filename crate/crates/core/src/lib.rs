//! Learned JKO solution operators for parameterized Wasserstein gradient flows.
//!
//! A single attention-based operator maps a particle representation of a
//! density to the displacement field of one JKO step. It is trained on
//! trajectories it generates itself, and scored against analytic references
//! (Barenblatt profiles, ring equilibria, Gaussian KL).

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod energy;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod operator;
pub mod oracles;
pub mod training;

pub use error::{Error, Result};
