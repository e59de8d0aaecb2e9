//! Collaborative training of a small neural network where participants
//! perturb polynomial approximations of their loss with Laplace noise and a
//! server picks which uploads to average with the exponential mechanism.

pub mod config;
pub mod datasets;
pub mod dp;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngState};
