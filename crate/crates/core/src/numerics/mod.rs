//! Dense matrices and seeded random streams.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub use rng::{derive_seed, laplace_inverse_cdf, splitmix64, RngState};
