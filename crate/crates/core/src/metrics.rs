//! Evaluation metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::model::{Featurizer, ModelParams, Task};

/// Mean relative error `(1/n) sum |z - y| / y`.
pub fn mre(predictions: &[f64], labels: &[f64], y_floor: f64) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            op: "mre",
            left: (predictions.len(), 1),
            right: (labels.len(), 1),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("mre"));
    }
    let mut total = 0.0;
    for (&z, &y) in predictions.iter().zip(labels) {
        if !(y >= y_floor && y > 0.0) {
            return Err(Error::Data(format!("label {y} below floor {y_floor}")));
        }
        total += (z - y).abs() / y;
    }
    Ok(total / labels.len() as f64)
}

/// Fraction of positions where `predicted == truth`.
pub fn accuracy<T: PartialEq>(predicted: &[T], truth: &[T]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape {
            op: "accuracy",
            left: (predicted.len(), 1),
            right: (truth.len(), 1),
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / truth.len() as f64)
}

/// How per-class sigmoid outputs become a predicted label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassDecision {
    /// Highest-scoring class against the one-hot label's class.
    #[default]
    Argmax,
    /// Every class thresholded at 0.5 must match its indicator.
    Threshold,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Per-row correctness of a classifier.
pub fn classification_hits(
    params: &ModelParams,
    featurizer: &Featurizer,
    data: &Dataset,
    decision: ClassDecision,
) -> Result<Vec<bool>> {
    let features = featurizer.apply_batch(&data.features)?;
    let probs = params.predict_batch(&features)?;
    Ok((0..data.len())
        .map(|i| match decision {
            ClassDecision::Argmax => argmax(probs.row(i)) == argmax(data.labels.row(i)),
            ClassDecision::Threshold => probs
                .row(i)
                .iter()
                .zip(data.labels.row(i))
                .all(|(&p, &y)| (p >= 0.5) == (y >= 0.5)),
        })
        .collect())
}

/// Regression predictions for every row.
pub fn regression_predictions(params: &ModelParams, featurizer: &Featurizer, data: &Dataset) -> Result<Vec<f64>> {
    let features = featurizer.apply_batch(&data.features)?;
    Ok(params.predict_batch(&features)?.column(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mre,
    Accuracy,
}

impl MetricKind {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Regression => MetricKind::Mre,
            Task::Classification => MetricKind::Accuracy,
        }
    }

    /// Whether `value` meets `target` (lower MRE, higher accuracy).
    pub fn reached(self, value: f64, target: f64) -> bool {
        match self {
            MetricKind::Mre => value <= target,
            MetricKind::Accuracy => value >= target,
        }
    }
}

/// The task's headline metric on `data`.
pub fn evaluate(
    task: Task,
    params: &ModelParams,
    featurizer: &Featurizer,
    data: &Dataset,
    y_floor: f64,
    decision: ClassDecision,
) -> Result<f64> {
    match task {
        Task::Regression => mre(
            &regression_predictions(params, featurizer, data)?,
            &data.labels.column(0),
            y_floor,
        ),
        Task::Classification => {
            let hits = classification_hits(params, featurizer, data, decision)?;
            accuracy(&hits, &vec![true; hits.len()])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub round: usize,
    pub kind: MetricKind,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub special: Option<f64>,
    /// Mean score of selected uploads minus mean score of the rest.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub utility_gap: Option<f64>,
}

/// Flat `round,metric,value` rows for plotting.
pub fn write_metrics_csv<W: Write>(out: W, snapshots: &[MetricSnapshot]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "metric", "value"])?;
    for s in snapshots {
        let name = match s.kind {
            MetricKind::Mre => "mre",
            MetricKind::Accuracy => "accuracy",
        };
        w.write_record([s.round.to_string(), name.to_string(), s.value.to_string()])?;
        if let Some(v) = s.special {
            w.write_record([s.round.to_string(), format!("special_{name}"), v.to_string()])?;
        }
        if let Some(v) = s.utility_gap {
            w.write_record([s.round.to_string(), "utility_gap".to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
