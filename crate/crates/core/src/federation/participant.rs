use log::warn;

use crate::config::TrainMode;
use crate::datasets::{Dataset, ReliabilityProfile};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Task};
use crate::numerics::{Matrix, RngState};
use crate::objective::{coeffs_from_hidden, grad_with_trace, perturb_coeffs, Batch, Sensitivity};

/// Hyper-parameters of one participant's local training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// `None` trains on the unperturbed surrogate.
    pub epsilon2: Option<f64>,
    pub train_mode: TrainMode,
    pub grad_clip: Option<f64>,
}

/// Walks a shard in shuffled, disjoint batches; reshuffles after each pass.
#[derive(Clone, Debug)]
pub struct EpochCursor {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

impl EpochCursor {
    pub fn new(n: usize, rng: &mut RngState) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        EpochCursor {
            order,
            pos: 0,
            epoch: 0,
        }
    }

    /// Row indices of the next batch and the epoch it belongs to. The last
    /// batch of an epoch holds whatever rows remain.
    pub fn next_batch(&mut self, size: usize, rng: &mut RngState) -> (Vec<usize>, u64) {
        if self.pos >= self.order.len() {
            rng.shuffle(&mut self.order);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + size).min(self.order.len());
        let rows = self.order[self.pos..end].to_vec();
        self.pos = end;
        (rows, self.epoch)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

/// What a participant sends back after a round.
#[derive(Clone, Debug)]
pub struct LocalUpdate {
    pub params: ModelParams,
    /// Epochs whose batches were used, ascending. Empty for fabricated uploads.
    pub epochs: Vec<u64>,
}

pub struct ParticipantState {
    pub id: usize,
    pub profile: ReliabilityProfile,
    /// The shard as held, after any corruption.
    pub shard: Dataset,
    /// `shard.features` passed through the featurizer.
    pub features: Matrix,
    pub params: ModelParams,
    pub join_round: usize,
    pub leave_round: Option<usize>,
    pub stop_threshold: Option<f64>,
    pub departed: bool,
    cursor: EpochCursor,
    data_rng: RngState,
    noise_rng: RngState,
    upload_rng: RngState,
    warned_small: bool,
}

const DATA: u64 = 1;
const NOISE: u64 = 2;
const UPLOAD: u64 = 3;

impl ParticipantState {
    /// `rng` is this participant's own stream; its children drive batch
    /// order, objective noise and fabricated uploads separately.
    pub fn new(
        id: usize,
        profile: ReliabilityProfile,
        shard: Dataset,
        features: Matrix,
        params: ModelParams,
        rng: &RngState,
    ) -> Self {
        let mut data_rng = rng.child(DATA);
        let cursor = EpochCursor::new(shard.len(), &mut data_rng);
        ParticipantState {
            id,
            profile,
            shard,
            features,
            params,
            join_round: 1,
            leave_round: None,
            stop_threshold: None,
            departed: false,
            cursor,
            data_rng,
            noise_rng: rng.child(NOISE),
            upload_rng: rng.child(UPLOAD),
            warned_small: false,
        }
    }

    pub fn is_live(&self, round: usize) -> bool {
        !self.departed && round >= self.join_round && self.leave_round.is_none_or(|l| round < l)
    }

    pub fn epoch(&self) -> u64 {
        self.cursor.epoch()
    }

    /// `I` steps of SGD on freshly perturbed batch objectives, starting
    /// from `self.params`. Malicious participants skip training and send
    /// uniform weights.
    pub fn local_round(&mut self, task: Task, sensitivity: Sensitivity, cfg: &LocalConfig) -> Result<LocalUpdate> {
        if self.profile == ReliabilityProfile::Malicious {
            let params = malicious_upload(&self.params, &mut self.upload_rng);
            return Ok(LocalUpdate {
                params,
                epochs: Vec::new(),
            });
        }
        if self.shard.is_empty() {
            return Err(Error::Empty("participant shard"));
        }
        if self.shard.len() < cfg.batch_size && !self.warned_small {
            warn!(
                "participant {}: shard of {} rows is smaller than the batch size {}; using the whole shard",
                self.id,
                self.shard.len(),
                cfg.batch_size
            );
            self.warned_small = true;
        }
        let mut epochs: Vec<u64> = Vec::new();
        let last = self.params.layers.len() - 1;
        for _ in 0..cfg.iterations {
            let (rows, epoch) = self.cursor.next_batch(cfg.batch_size, &mut self.data_rng);
            if epochs.last() != Some(&epoch) {
                epochs.push(epoch);
            }
            let batch = Batch {
                features: self.features.select_rows(&rows),
                labels: self.shard.labels.select_rows(&rows),
            };
            let trace = self.params.trace(&batch.features)?;
            let coeffs = coeffs_from_hidden(task, trace.last_hidden(), &batch.labels)?;
            let coeffs = match cfg.epsilon2 {
                Some(eps) => perturb_coeffs(&coeffs, sensitivity, eps, &mut self.noise_rng)?,
                None => coeffs,
            };
            let mut g = grad_with_trace(&coeffs, &batch, &self.params, &trace)?;
            if cfg.train_mode == TrainMode::LastLayerOnly {
                for layer in &mut g.layers[..last] {
                    layer.scale(0.0);
                }
            }
            if let Some(limit) = cfg.grad_clip {
                let norm = g.norm();
                if norm > limit {
                    for layer in &mut g.layers {
                        layer.scale(limit / norm);
                    }
                }
            }
            for (w, d) in self.params.layers.iter_mut().zip(&g.layers) {
                w.axpy(-cfg.learning_rate, d)?;
            }
            if !self.params.is_finite() {
                return Err(Error::NonFinite("local update"));
            }
        }
        Ok(LocalUpdate {
            params: self.params.clone(),
            epochs,
        })
    }
}

/// Weights with the shapes of `like`, every entry uniform in `[0, 1)`.
pub fn malicious_upload(like: &ModelParams, rng: &mut RngState) -> ModelParams {
    ModelParams {
        layers: like
            .layers
            .iter()
            .map(|m| Matrix::from_fn(m.rows(), m.cols(), |_, _| rng.next_f64()))
            .collect(),
    }
}
