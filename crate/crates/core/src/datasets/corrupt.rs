use serde::{Deserialize, Serialize};

use super::{Dataset, ReliabilityProfile};
use crate::numerics::RngState;

/// Which parts of a corrupted row are replaced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionTarget {
    #[default]
    FeaturesAndLabel,
    LabelOnly,
}

/// Replaces `floor(P * n)` uniformly chosen rows with uniform `[0, 1]` noise.
///
/// Only `Unreliable(P)` changes the shard; other profiles return it as is.
/// Classification rows get a uniformly drawn one-hot label.
pub fn corrupt(shard: &Dataset, profile: ReliabilityProfile, target: CorruptionTarget, rng: &mut RngState) -> Dataset {
    let ReliabilityProfile::Unreliable(fraction) = profile else {
        return shard.clone();
    };
    let n = shard.len();
    let count = ((fraction.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n);
    let mut out = shard.clone();
    let outputs = out.num_outputs();
    for row in rng.sample_indices(n, count) {
        if target == CorruptionTarget::FeaturesAndLabel {
            for v in out.features.row_mut(row) {
                *v = rng.next_f64();
            }
        }
        let labels = out.labels.row_mut(row);
        if outputs == 1 {
            labels[0] = rng.next_f64();
        } else {
            let class = rng.index(outputs);
            for (k, v) in labels.iter_mut().enumerate() {
                *v = if k == class { 1.0 } else { 0.0 };
            }
        }
    }
    out
}
