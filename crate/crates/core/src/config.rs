//! Run configuration.
//!
//! A [`RunConfig`] is what users write; [`RunConfig::resolve`] fills every
//! default so that the resolved form, written back out, reproduces the run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datasets::{CorruptionTarget, ReliabilityProfile, DEFAULT_Y_FLOOR};
use crate::error::{Error, Result};
use crate::metrics::ClassDecision;
use crate::model::{FeaturizerSpec, Task, CLASSIFICATION_HIDDEN, REGRESSION_HIDDEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    SyntheticRegression {
        n: usize,
        d: usize,
        #[serde(default)]
        noise_sd: f64,
    },
    SyntheticClassification {
        n: usize,
        d: usize,
        classes: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    Csv {
        path: PathBuf,
        schema: PathBuf,
        #[serde(default)]
        log_label: bool,
    },
}

fn default_spread() -> f64 {
    0.1
}

impl DataSource {
    /// Task implied by a synthetic source; CSV sources decide from the schema.
    pub fn synthetic_task(&self) -> Option<Task> {
        match self {
            DataSource::SyntheticRegression { .. } => Some(Task::Regression),
            DataSource::SyntheticClassification { .. } => Some(Task::Classification),
            DataSource::Csv { .. } => None,
        }
    }
}

/// Range-holdout by feature name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecialSpec {
    pub column: String,
    pub low: f64,
    pub high: f64,
    #[serde(default)]
    pub test_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipantGroup {
    pub count: usize,
    #[serde(default = "clean")]
    pub profile: ReliabilityProfile,
    /// First round the group takes part in.
    #[serde(default = "one")]
    pub join_round: usize,
    /// First round the group no longer takes part in.
    #[serde(default)]
    pub leave_round: Option<usize>,
    /// Leaves once the global model's metric on its own shard reaches this.
    #[serde(default)]
    pub stop_threshold: Option<f64>,
}

fn clean() -> ReliabilityProfile {
    ReliabilityProfile::Clean
}

fn one() -> usize {
    1
}

impl ParticipantGroup {
    pub fn clean(count: usize) -> Self {
        ParticipantGroup {
            count,
            profile: ReliabilityProfile::Clean,
            join_round: 1,
            leave_round: None,
            stop_threshold: None,
        }
    }

    pub fn with_profile(count: usize, profile: ReliabilityProfile) -> Self {
        ParticipantGroup {
            profile,
            ..ParticipantGroup::clean(count)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectMode {
    /// Every live participant races; the first `m` arrivals are kept.
    #[default]
    Threshold,
    /// A random `m`-subset is asked to train each round.
    PreAssign,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Exponential,
    Uniform,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Full,
    /// Hidden layers stay at their initial values.
    LastLayerOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(default = "default_y_floor")]
    pub y_floor: f64,
    /// Server-side validation rows; defaults to a tenth of the data.
    #[serde(default)]
    pub validation_size: Option<usize>,
    /// Test rows; defaults to a tenth of the data.
    #[serde(default)]
    pub test_size: Option<usize>,
    #[serde(default)]
    pub shard_size: Option<usize>,
    #[serde(default)]
    pub special: Option<SpecialSpec>,

    /// Hidden widths; defaults to the task's standard width.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub featurizer: FeaturizerSpec,
    #[serde(default = "default_init_sd")]
    pub init_sd: f64,

    pub participants: Vec<ParticipantGroup>,
    /// Uploads accepted per round; defaults to half the participants.
    #[serde(default)]
    pub m: Option<usize>,
    /// Uploads averaged per round; defaults to half of `m`.
    #[serde(default)]
    pub k: Option<usize>,

    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon1: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon2: f64,

    /// Maximum number of rounds.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Stop once the test metric reaches this value.
    #[serde(default)]
    pub target_metric: Option<f64>,

    #[serde(default)]
    pub collect_mode: CollectMode,
    #[serde(default)]
    pub selection: Selection,
    #[serde(default)]
    pub train_mode: TrainMode,
    /// Rescale gradients whose norm exceeds this.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub corruption: CorruptionTarget,
    #[serde(default)]
    pub class_decision: ClassDecision,

    #[serde(default)]
    pub seed: u64,
    /// Write a checkpoint every this many rounds (the final one always).
    #[serde(default)]
    pub checkpoint_interval: Option<usize>,
    /// Also record each upload's test metric.
    #[serde(default)]
    pub local_metrics: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_y_floor() -> f64 {
    DEFAULT_Y_FLOOR
}
fn default_init_sd() -> f64 {
    1.0
}
fn default_iterations() -> usize {
    100
}
fn default_batch_size() -> usize {
    128
}
fn default_learning_rate() -> f64 {
    0.01
}
fn default_epsilon() -> f64 {
    1.0
}
fn default_rounds() -> usize {
    100
}

fn field(name: &str, reason: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {reason}"))
}

impl RunConfig {
    /// A synthetic regression config with every optional field at its default.
    pub fn synthetic(n: usize, d: usize, participants: usize) -> Self {
        RunConfig {
            data: DataSource::SyntheticRegression { n, d, noise_sd: 0.0 },
            y_floor: DEFAULT_Y_FLOOR,
            validation_size: None,
            test_size: None,
            shard_size: None,
            special: None,
            hidden: None,
            featurizer: FeaturizerSpec::Identity,
            init_sd: 1.0,
            participants: vec![ParticipantGroup::clean(participants)],
            m: None,
            k: None,
            iterations: default_iterations(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            epsilon1: 1.0,
            epsilon2: 1.0,
            rounds: default_rounds(),
            target_metric: None,
            collect_mode: CollectMode::Threshold,
            selection: Selection::Exponential,
            train_mode: TrainMode::Full,
            grad_clip: None,
            corruption: CorruptionTarget::FeaturesAndLabel,
            class_decision: ClassDecision::Argmax,
            seed: 0,
            checkpoint_interval: None,
            local_metrics: false,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn num_participants(&self) -> usize {
        self.participants.iter().map(|g| g.count).sum()
    }

    /// Profiles by participant id.
    pub fn expanded_participants(&self) -> Vec<ParticipantGroup> {
        self.participants
            .iter()
            .flat_map(|g| std::iter::repeat_n(g.clone(), g.count))
            .map(|g| ParticipantGroup { count: 1, ..g })
            .collect()
    }

    /// Materializes defaults that depend on other fields, the task and the
    /// number of data rows.
    pub fn resolve(&self, task: Task, rows: usize) -> Result<RunConfig> {
        let mut out = self.clone();
        let tenth = (rows / 10).clamp(1, 10_000);
        out.validation_size.get_or_insert(tenth);
        out.test_size.get_or_insert(tenth);
        let n = self.num_participants();
        if out.hidden.is_none() {
            out.hidden = Some(vec![match task {
                Task::Regression => REGRESSION_HIDDEN,
                Task::Classification => CLASSIFICATION_HIDDEN,
            }]);
        }
        let m = *out.m.get_or_insert((n / 2).max(1));
        out.k.get_or_insert((m / 2).max(1));
        out.validate()?;
        Ok(out)
    }

    /// Field-level checks; expects a resolved config.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_participants();
        if n == 0 {
            return Err(field("participants", "need at least one participant"));
        }
        let m = self.m.ok_or_else(|| field("m", "unresolved"))?;
        let k = self.k.ok_or_else(|| field("k", "unresolved"))?;
        if self.validation_size == Some(0) || self.test_size == Some(0) {
            return Err(field("validation_size/test_size", "must be at least 1"));
        }
        if m == 0 || k == 0 {
            return Err(field("m/k", "must be at least 1"));
        }
        if m > n {
            return Err(field("m", format!("{m} exceeds the {n} participants")));
        }
        if k > m {
            return Err(field("k", format!("{k} exceeds m = {m}")));
        }
        for (name, eps) in [("epsilon1", self.epsilon1), ("epsilon2", self.epsilon2)] {
            if !(eps > 0.0) || !eps.is_finite() {
                return Err(field(name, format!("must be a positive number, got {eps}")));
            }
        }
        if self.batch_size == 0 {
            return Err(field("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(field("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.y_floor) {
            return Err(field("y_floor", "must be in [0, 1)"));
        }
        if !(self.init_sd > 0.0) {
            return Err(field("init_sd", "must be positive"));
        }
        if let Some(h) = &self.hidden {
            if h.is_empty() || h.contains(&0) {
                return Err(field("hidden", "need at least one layer, each of width >= 1"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(field("grad_clip", "must be positive"));
            }
        }
        if self.checkpoint_interval == Some(0) {
            return Err(field("checkpoint_interval", "must be at least 1"));
        }
        for (i, g) in self.participants.iter().enumerate() {
            g.profile
                .validate()
                .map_err(|e| field(&format!("participants[{i}].profile"), e))?;
            if g.join_round == 0 {
                return Err(field(&format!("participants[{i}].join_round"), "rounds start at 1"));
            }
            if matches!(g.leave_round, Some(l) if l <= g.join_round) {
                return Err(field(
                    &format!("participants[{i}].leave_round"),
                    "must come after join_round",
                ));
            }
        }
        let initial = self
            .participants
            .iter()
            .filter(|g| g.join_round == 1)
            .map(|g| g.count)
            .sum::<usize>();
        if initial < m {
            return Err(field(
                "m",
                format!("{m} exceeds the {initial} participants present in round 1"),
            ));
        }
        let has_special = self
            .participants
            .iter()
            .any(|g| g.profile == ReliabilityProfile::Special && g.count > 0);
        if has_special && self.special.is_none() {
            return Err(field("special", "special participants need a holdout rule"));
        }
        Ok(())
    }
}
