use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::RngState;

/// Range-holdout rule: rows whose `column` value is `<= low` or `>= high`
/// are withheld from the general pool and handed to special participants
/// and a special test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecialRule {
    pub column: usize,
    pub low: f64,
    pub high: f64,
    /// Participant ids that receive held-out rows.
    pub participants: Vec<usize>,
    pub test_size: usize,
}

impl SpecialRule {
    pub fn matches(&self, value: f64) -> bool {
        value <= self.low || value >= self.high
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub participants: usize,
    pub validation_size: usize,
    pub test_size: usize,
    /// Fixed rows per participant; `None` splits the pool evenly.
    pub shard_size: Option<usize>,
    pub special: Option<SpecialRule>,
}

/// Row indices into the source dataset. All sets are pairwise disjoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub special_test: Vec<usize>,
}

fn split_pool(pool: &[usize], ids: &[usize], shard_size: Option<usize>, shards: &mut [Vec<usize>]) -> Result<()> {
    if ids.is_empty() {
        return Ok(());
    }
    match shard_size {
        Some(size) => {
            if size * ids.len() > pool.len() {
                return Err(Error::Data(format!(
                    "{} shards of {size} rows need {} rows, only {} available",
                    ids.len(),
                    size * ids.len(),
                    pool.len()
                )));
            }
            for (k, &id) in ids.iter().enumerate() {
                shards[id] = pool[k * size..(k + 1) * size].to_vec();
            }
        }
        None => {
            let base = pool.len() / ids.len();
            let extra = pool.len() % ids.len();
            let mut start = 0;
            for (k, &id) in ids.iter().enumerate() {
                let len = base + usize::from(k < extra);
                shards[id] = pool[start..start + len].to_vec();
                start += len;
            }
        }
    }
    Ok(())
}

/// Shuffles the rows and splits them into test, validation and shards.
pub fn partition(ds: &Dataset, plan: &PartitionPlan, rng: &mut RngState) -> Result<Partition> {
    let n = ds.len();
    if plan.participants == 0 {
        return Err(Error::param("participants", "need at least one"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);

    let (general, held_out): (Vec<usize>, Vec<usize>) = match &plan.special {
        Some(rule) => {
            if rule.column >= ds.width() {
                return Err(Error::param("special.column", format!("{} out of range", rule.column)));
            }
            if let Some(&bad) = rule.participants.iter().find(|&&p| p >= plan.participants) {
                return Err(Error::param("special.participants", format!("id {bad} out of range")));
            }
            order
                .iter()
                .partition(|&&i| !rule.matches(ds.features.get(i, rule.column)))
        }
        None => (order, Vec::new()),
    };

    let reserved = plan.test_size + plan.validation_size;
    if reserved > general.len() {
        return Err(Error::Data(format!(
            "test ({}) + validation ({}) exceed the {} available rows",
            plan.test_size,
            plan.validation_size,
            general.len()
        )));
    }
    let test = general[..plan.test_size].to_vec();
    let validation = general[plan.test_size..reserved].to_vec();
    let pool = &general[reserved..];

    let special_ids: &[usize] = plan.special.as_ref().map_or(&[], |r| &r.participants);
    let general_ids: Vec<usize> = (0..plan.participants).filter(|id| !special_ids.contains(id)).collect();
    let mut shards = vec![Vec::new(); plan.participants];
    split_pool(pool, &general_ids, plan.shard_size, &mut shards)?;

    let mut special_test = Vec::new();
    if let Some(rule) = &plan.special {
        if rule.test_size > held_out.len() {
            return Err(Error::Data(format!(
                "special test size {} exceeds the {} held-out rows",
                rule.test_size,
                held_out.len()
            )));
        }
        special_test = held_out[..rule.test_size].to_vec();
        split_pool(&held_out[rule.test_size..], special_ids, plan.shard_size, &mut shards)?;
    }
    Ok(Partition {
        shards,
        validation,
        test,
        special_test,
    })
}
