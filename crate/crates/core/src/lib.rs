//! Desk-scale active accelerated MRI: two jointly trained networks (image
//! reconstruction and progressive k-space line sampling) whose training
//! signals come from Monte Carlo tree search, plus classical sampling and
//! reconstruction baselines and an evaluation harness.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod mcts;
pub mod reconnet;
pub mod sampling;
pub mod samplenet;
pub mod selfplay;
pub mod signal;
pub mod tv;

pub use error::{Error, Result};
pub use samplenet::PolicyVector;
pub use signal::{Image, LineMask, SpectralGrid};
