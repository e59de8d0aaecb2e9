//! Fixtures shared by the benchmarks.

use privfed::model::{init_params_scaled, Architecture, ModelParams};
use privfed::objective::Batch;
use privfed::{Matrix, RngState};

/// A regression network and a random batch of `rows` records.
pub fn regression_fixture(d: usize, hidden: usize, rows: usize, seed: u64) -> (Architecture, ModelParams, Batch) {
    let arch = Architecture::regression(d, hidden);
    let params = init_params_scaled(&arch, seed, 0.3);
    let mut rng = RngState::from_seed(seed ^ 0x9e37);
    let batch = Batch {
        features: Matrix::from_fn(rows, d, |_, _| rng.next_f64()),
        labels: Matrix::from_fn(rows, 1, |_, _| 0.05 + 0.95 * rng.next_f64()),
    };
    (arch, params, batch)
}
