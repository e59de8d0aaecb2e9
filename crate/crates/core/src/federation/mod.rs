//! The collaborative training loop: participants train on perturbed
//! objectives, the server collects uploads, scores them on its validation
//! set, selects some with the exponential mechanism and averages them.

mod participant;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CollectMode, DataSource, RunConfig, Selection};
use crate::datasets::{
    corrupt, partition, prepare, read_csv, read_schema, synth_classification, synth_regression, Dataset,
    DatasetManifest, Encoding, Partition, PartitionPlan, PrepareOptions, ReliabilityProfile, SpecialRule,
};
use crate::dp::{self, ledger_report, BudgetLedger, PrivacyReport, UtilityScore};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricKind, MetricSnapshot};
use crate::model::{init_params_scaled, Architecture, Featurizer, ModelParams, Task};
use crate::numerics::{derive_seed, RngState};
use crate::objective::{sensitivity, Sensitivity};

pub use participant::{malicious_upload, EpochCursor, LocalConfig, LocalUpdate, ParticipantState};

const TAG_DATA: u64 = 1;
const TAG_PARTITION: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_PARTICIPANT: u64 = 4;
const TAG_ROUND: u64 = 5;
const TAG_CORRUPT: u64 = 6;

/// Everything derived from a config before round 1.
#[derive(Clone, Debug)]
pub struct Environment {
    /// The config with every default filled in.
    pub config: RunConfig,
    pub task: Task,
    pub arch: Architecture,
    pub featurizer: Featurizer,
    pub data: Dataset,
    pub manifest: Option<DatasetManifest>,
    pub partition: Partition,
    pub validation: Dataset,
    pub test: Dataset,
    pub special_test: Option<Dataset>,
    /// Shards as assigned, before corruption.
    pub clean_shards: Vec<Dataset>,
    /// Shards as held by participants.
    pub shards: Vec<Dataset>,
    pub initial_params: ModelParams,
}

fn load_data(config: &RunConfig) -> Result<(Dataset, Task, Option<DatasetManifest>)> {
    let mut rng = RngState::from_seed(derive_seed(config.seed, &[TAG_DATA]));
    match &config.data {
        DataSource::SyntheticRegression { n, d, noise_sd } => {
            let (ds, _) = synth_regression(*n, *d, *noise_sd, config.y_floor, &mut rng);
            Ok((ds, Task::Regression, None))
        }
        DataSource::SyntheticClassification { n, d, classes, spread } => {
            if *classes < 2 {
                return Err(Error::Config("data.classes: need at least 2".into()));
            }
            Ok((
                synth_classification(*n, *d, *classes, *spread, &mut rng),
                Task::Classification,
                None,
            ))
        }
        DataSource::Csv {
            path,
            schema,
            log_label,
        } => {
            let raw = read_csv(path)?;
            let schema = read_schema(schema)?;
            let opts = PrepareOptions {
                log_label: *log_label,
                y_floor: config.y_floor,
            };
            let (ds, mut manifest) = prepare(&raw, &schema, &opts)?;
            manifest.seed = Some(config.seed);
            let task = if manifest
                .columns
                .iter()
                .any(|c| matches!(c.encoding, Encoding::ClassLabel { .. }))
            {
                Task::Classification
            } else {
                Task::Regression
            };
            Ok((ds, task, Some(manifest)))
        }
    }
}

fn participant_rng(seed: u64, id: usize) -> RngState {
    RngState::from_seed(derive_seed(seed, &[TAG_PARTICIPANT, id as u64]))
}

/// Loads data, resolves defaults, partitions and corrupts shards.
pub fn build_environment(config: &RunConfig) -> Result<Environment> {
    let (data, task, manifest) = load_data(config)?;
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let config = config.resolve(task, data.len())?;
    let members = config.expanded_participants();

    let special = match &config.special {
        Some(spec) => {
            let column = data
                .feature_names
                .iter()
                .position(|n| n == &spec.column)
                .ok_or_else(|| Error::Config(format!("special.column: no feature named `{}`", spec.column)))?;
            Some(SpecialRule {
                column,
                low: spec.low,
                high: spec.high,
                participants: members
                    .iter()
                    .enumerate()
                    .filter(|(_, g)| g.profile == ReliabilityProfile::Special)
                    .map(|(i, _)| i)
                    .collect(),
                test_size: spec.test_size,
            })
        }
        None => None,
    };
    let plan = PartitionPlan {
        participants: members.len(),
        validation_size: config.validation_size.unwrap_or(0),
        test_size: config.test_size.unwrap_or(0),
        shard_size: config.shard_size,
        special,
    };
    let parts = partition(
        &data,
        &plan,
        &mut RngState::from_seed(derive_seed(config.seed, &[TAG_PARTITION])),
    )?;

    let clean_shards: Vec<Dataset> = parts.shards.iter().map(|rows| data.subset(rows)).collect();
    if let Some(i) = clean_shards.iter().position(|s| s.is_empty()) {
        return Err(Error::Data(format!("participant {i} received no rows")));
    }
    let shards = clean_shards
        .iter()
        .zip(&members)
        .enumerate()
        .map(|(i, (s, g))| {
            let mut rng = RngState::from_seed(derive_seed(config.seed, &[TAG_CORRUPT, i as u64]));
            corrupt(s, g.profile, config.corruption, &mut rng)
        })
        .collect();

    let hidden = config.hidden.clone().unwrap_or_default();
    let output_width = data.num_outputs();
    let input_width = data.width();
    let arch = Architecture {
        input_width,
        hidden,
        output_width,
        task,
        featurizer: config.featurizer.clone(),
    };
    arch.validate()?;
    let featurizer = Featurizer::new(&arch.featurizer, input_width);
    let initial_params = init_params_scaled(&arch, derive_seed(config.seed, &[TAG_INIT]), config.init_sd);

    let special_test = (!parts.special_test.is_empty()).then(|| data.subset(&parts.special_test));
    Ok(Environment {
        validation: data.subset(&parts.validation),
        test: data.subset(&parts.test),
        special_test,
        clean_shards,
        shards,
        partition: parts,
        manifest,
        data,
        featurizer,
        arch,
        task,
        initial_params,
        config,
    })
}

impl Environment {
    pub fn local_config(&self, epsilon2: Option<f64>) -> LocalConfig {
        LocalConfig {
            batch_size: self.config.batch_size,
            iterations: self.config.iterations,
            learning_rate: self.config.learning_rate,
            epsilon2,
            train_mode: self.config.train_mode,
            grad_clip: self.config.grad_clip,
        }
    }

    pub fn sensitivity(&self) -> Sensitivity {
        sensitivity(&self.arch)
    }

    pub fn metric_kind(&self) -> MetricKind {
        MetricKind::for_task(self.task)
    }

    /// Headline metric of `params` on `data`.
    pub fn evaluate(&self, params: &ModelParams, data: &Dataset) -> Result<f64> {
        evaluate(
            self.task,
            params,
            &self.featurizer,
            data,
            self.config.y_floor,
            self.config.class_decision,
        )
    }

    /// Fresh participant states, all holding the initial parameters.
    pub fn participants(&self) -> Result<Vec<ParticipantState>> {
        let members = self.config.expanded_participants();
        members
            .iter()
            .zip(&self.shards)
            .enumerate()
            .map(|(id, (g, shard))| {
                let features = self.featurizer.apply_batch(&shard.features)?;
                let mut p = ParticipantState::new(
                    id,
                    g.profile,
                    shard.clone(),
                    features,
                    self.initial_params.clone(),
                    &participant_rng(self.config.seed, id),
                );
                p.join_round = g.join_round;
                p.leave_round = g.leave_round;
                p.stop_threshold = g.stop_threshold;
                Ok(p)
            })
            .collect()
    }

    fn snapshot(&self, round: usize, params: &ModelParams, utility_gap: Option<f64>) -> Result<MetricSnapshot> {
        let special = match &self.special_test {
            Some(ds) => Some(self.evaluate(params, ds)?),
            None => None,
        };
        Ok(MetricSnapshot {
            round,
            kind: self.metric_kind(),
            value: self.evaluate(params, &self.test)?,
            special,
            utility_gap,
        })
    }
}

/// Elementwise mean of the uploads.
pub fn aggregate(uploads: &[&ModelParams]) -> Result<ModelParams> {
    let first = uploads.first().ok_or(Error::Empty("aggregate"))?;
    let expected = first.shapes();
    for (index, u) in uploads.iter().enumerate() {
        let found = u.shapes();
        if found != expected {
            return Err(Error::UploadShape {
                index,
                expected: expected.clone(),
                found,
            });
        }
    }
    let mut out = (*first).clone();
    for u in &uploads[1..] {
        for (acc, layer) in out.layers.iter_mut().zip(&u.layers) {
            acc.axpy(1.0, layer)?;
        }
    }
    let k = uploads.len() as f64;
    for layer in &mut out.layers {
        layer.scale(1.0 / k);
    }
    Ok(out)
}

/// Ids that upload this round, in arrival order, and the ids told to stop.
pub fn collect(
    live: &[usize],
    m: usize,
    mode: CollectMode,
    round: usize,
    rng: &mut RngState,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if live.len() < m {
        return Err(Error::NotEnoughParticipants {
            round,
            live: live.len(),
            needed: m,
        });
    }
    match mode {
        CollectMode::Threshold => {
            let mut order = live.to_vec();
            rng.shuffle(&mut order);
            let stopped = order.split_off(m);
            Ok((order, stopped))
        }
        CollectMode::PreAssign => {
            let mut picks = rng.sample_indices(live.len(), m);
            picks.sort_unstable();
            Ok((picks.into_iter().map(|i| live[i]).collect(), Vec::new()))
        }
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Accepted uploads, in arrival order.
    pub uploaders: Vec<usize>,
    /// Live participants told to stop because `m` uploads had arrived.
    pub stopped: Vec<usize>,
    pub scores: Vec<UtilityScore>,
    pub selected: Vec<usize>,
    pub digest: String,
    pub metrics: MetricSnapshot,
    pub privacy: Option<PrivacyReport>,
    /// Participants that reached their own stop threshold after this round.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub departed: Vec<usize>,
    /// Test metric of every upload, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_metrics: Option<Vec<(usize, f64)>>,
}

#[derive(Clone, Debug)]
pub struct RunLog {
    pub records: Vec<RoundRecord>,
    pub params: ModelParams,
    pub ledger: Option<BudgetLedger>,
    /// First round whose metric met the target.
    pub reached_target: Option<usize>,
}

/// Called after every round with the record and the new global model.
pub type Observer<'a> = dyn FnMut(&RoundRecord, &ModelParams) -> Result<()> + 'a;

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Runs the protocol until the round budget is spent or the target metric
/// is reached. Output does not depend on `threads`.
pub fn run_simulation(env: &Environment, threads: usize, observer: &mut Observer<'_>) -> Result<RunLog> {
    let cfg = &env.config;
    let m = cfg.m.ok_or_else(|| Error::Config("m: unresolved".into()))?;
    let k = cfg.k.ok_or_else(|| Error::Config("k: unresolved".into()))?;
    let mut participants = env.participants()?;
    let local = env.local_config(Some(cfg.epsilon2));
    let sens = env.sensitivity();
    let du = dp::utility_sensitivity(env.task);
    let mut ledger = BudgetLedger::new(cfg.epsilon1, cfg.epsilon2);
    let mut global = env.initial_params.clone();
    let mut records = Vec::new();
    let mut reached_target = None;

    for round in 1..=cfg.rounds {
        let round_rng = RngState::from_seed(derive_seed(cfg.seed, &[TAG_ROUND, round as u64]));
        let live: Vec<usize> = participants.iter().filter(|p| p.is_live(round)).map(|p| p.id).collect();
        let (uploaders, stopped) = collect(&live, m, cfg.collect_mode, round, &mut round_rng.child(1))?;

        let mut updates: Vec<(usize, Result<LocalUpdate>)> = with_pool(threads, || {
            participants
                .par_iter_mut()
                .filter(|p| uploaders.contains(&p.id))
                .map(|p| {
                    p.params = global.clone();
                    (p.id, p.local_round(env.task, sens, &local))
                })
                .collect()
        })?;
        updates.sort_by_key(|(id, _)| uploaders.iter().position(|u| u == id));
        let updates: Vec<(usize, LocalUpdate)> = updates
            .into_iter()
            .map(|(id, r)| r.map(|u| (id, u)))
            .collect::<Result<_>>()?;

        let scores: Vec<UtilityScore> = with_pool(threads, || {
            updates
                .par_iter()
                .map(|(id, u)| {
                    dp::score(
                        env.task,
                        &u.params,
                        &env.featurizer,
                        &env.validation,
                        cfg.class_decision,
                    )
                    .map(|score| UtilityScore {
                        participant: *id,
                        score,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })??;

        let mut select_rng = round_rng.child(2);
        let selected = match cfg.selection {
            Selection::Exponential => dp::exp_sample(&scores, k, cfg.epsilon1, du, &mut select_rng)?,
            Selection::Uniform => dp::uniform_sample(&scores, k, &mut select_rng)?,
        };
        let chosen: Vec<&ModelParams> = selected
            .iter()
            .map(|id| {
                &updates
                    .iter()
                    .find(|(u, _)| u == id)
                    .expect("selected from uploads")
                    .1
                    .params
            })
            .collect();
        global = aggregate(&chosen)?;

        let mut round_epoch = 0;
        for (_, u) in &updates {
            for &e in &u.epochs {
                ledger.charge_objective(e);
                round_epoch = round_epoch.max(e);
            }
        }
        if cfg.selection == Selection::Exponential {
            ledger.charge_sampling(round_epoch, k);
        }

        let gap = match (
            mean(
                scores
                    .iter()
                    .filter(|s| selected.contains(&s.participant))
                    .map(|s| s.score),
            ),
            mean(
                scores
                    .iter()
                    .filter(|s| !selected.contains(&s.participant))
                    .map(|s| s.score),
            ),
        ) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        };
        let metrics = env.snapshot(round, &global, gap)?;
        let local_metrics = if cfg.local_metrics {
            Some(
                updates
                    .iter()
                    .map(|(id, u)| env.evaluate(&u.params, &env.test).map(|v| (*id, v)))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };

        let kind = env.metric_kind();
        let mut departed = Vec::new();
        for p in participants.iter_mut().filter(|p| p.is_live(round)) {
            p.params = global.clone();
            if let Some(t) = p.stop_threshold {
                let own = evaluate(env.task, &global, &env.featurizer, &p.shard, 0.0, cfg.class_decision);
                if own.is_ok_and(|v| kind.reached(v, t)) {
                    p.departed = true;
                    departed.push(p.id);
                }
            }
        }

        let record = RoundRecord {
            round,
            uploaders,
            stopped,
            scores,
            selected,
            digest: global.digest(),
            privacy: Some(ledger_report(&ledger, ledger.epochs())),
            metrics,
            departed,
            local_metrics,
        };
        observer(&record, &global)?;
        let done = cfg.target_metric.is_some_and(|t| kind.reached(record.metrics.value, t));
        records.push(record);
        if done {
            reached_target = Some(round);
            break;
        }
    }
    Ok(RunLog {
        records,
        params: global,
        ledger: Some(ledger),
        reached_target,
    })
}

/// Trains one model alone with unperturbed SGD, `iterations` steps per
/// round, and records the same metrics as the protocol.
fn solo_run(env: &Environment, mut solo: ParticipantState, observer: &mut Observer<'_>) -> Result<RunLog> {
    let cfg = &env.config;
    let local = env.local_config(None);
    let sens = env.sensitivity();
    let kind = env.metric_kind();
    let mut records = Vec::new();
    let mut reached_target = None;
    solo.profile = match solo.profile {
        ReliabilityProfile::Malicious => ReliabilityProfile::Clean,
        p => p,
    };
    for round in 1..=cfg.rounds {
        let update = solo.local_round(env.task, sens, &local)?;
        let metrics = env.snapshot(round, &update.params, None)?;
        let record = RoundRecord {
            round,
            uploaders: vec![solo.id],
            stopped: Vec::new(),
            scores: Vec::new(),
            selected: vec![solo.id],
            digest: update.params.digest(),
            metrics,
            privacy: None,
            departed: Vec::new(),
            local_metrics: None,
        };
        observer(&record, &update.params)?;
        let done = cfg.target_metric.is_some_and(|t| kind.reached(record.metrics.value, t));
        records.push(record);
        if done {
            reached_target = Some(round);
            break;
        }
    }
    Ok(RunLog {
        records,
        params: solo.params,
        ledger: None,
        reached_target,
    })
}

/// One model trained on the union of all uncorrupted shards.
pub fn baseline_centralized(env: &Environment, observer: &mut Observer<'_>) -> Result<RunLog> {
    let parts: Vec<&Dataset> = env.clean_shards.iter().collect();
    let union = Dataset::concat(&parts)?;
    let features = env.featurizer.apply_batch(&union.features)?;
    let solo = ParticipantState::new(
        0,
        ReliabilityProfile::Clean,
        union,
        features,
        env.initial_params.clone(),
        &participant_rng(env.config.seed, 0),
    );
    solo_run(env, solo, observer)
}

/// Participant `id` training alone on its own shard.
pub fn baseline_standalone(env: &Environment, id: usize, observer: &mut Observer<'_>) -> Result<RunLog> {
    let mut all = env.participants()?;
    if id >= all.len() {
        return Err(Error::param("participant", format!("no participant {id}")));
    }
    solo_run(env, all.swap_remove(id), observer)
}

/// Writes `records` as JSON lines.
pub fn write_run_log(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Parses a JSON-lines run log; errors name the first bad line.
pub fn read_run_log(text: &str) -> Result<Vec<RoundRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("run log line {}: {e}", i + 1))))
        .collect()
}
