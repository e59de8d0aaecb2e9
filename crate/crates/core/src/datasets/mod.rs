//! Tabular data: ingestion and encoding, participant partitioning,
//! reliability profiles, and synthetic generators.

mod corrupt;
mod partition;
mod prepare;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use corrupt::{corrupt, CorruptionTarget};
pub use partition::{partition, Partition, PartitionPlan, SpecialRule};
pub use prepare::{
    fit, prepare, read_csv, read_schema, transform, ColumnEncoding, ColumnKind, DatasetManifest, Encoding,
    PrepareOptions, RawTable, Schema,
};
pub use synth::{synth_classification, synth_regression, RegressionGenerator};

/// Default lower bound for regression labels.
pub const DEFAULT_Y_FLOOR: f64 = 0.05;

/// Encoded rows: every feature and label entry lies in `[0, 1]`.
///
/// Regression datasets carry a single label column; classification datasets
/// carry one indicator column per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Matrix,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Matrix, feature_names: Vec<String>) -> Result<Self> {
        if features.rows() != labels.rows() {
            return Err(Error::Shape {
                op: "Dataset::new",
                left: features.shape(),
                right: labels.shape(),
            });
        }
        if feature_names.len() != features.cols() {
            return Err(Error::Data(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                features.cols()
            )));
        }
        let ds = Dataset {
            features,
            labels,
            feature_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks the unit-interval invariant.
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.features.as_slice().iter().all(in_unit) {
            return Err(Error::Data("feature outside [0, 1]".into()));
        }
        if !self.labels.as_slice().iter().all(in_unit) {
            return Err(Error::Data("label outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn num_outputs(&self) -> usize {
        self.labels.cols()
    }

    /// Regression label of row `i`.
    pub fn label(&self, i: usize) -> f64 {
        self.labels.get(i, 0)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: self.labels.select_rows(indices),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Stacks datasets with identical columns.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(Error::Empty("Dataset::concat"))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.width() != first.width() || p.num_outputs() != first.num_outputs() {
                return Err(Error::Shape {
                    op: "Dataset::concat",
                    left: (first.width(), first.num_outputs()),
                    right: (p.width(), p.num_outputs()),
                });
            }
            features.extend_from_slice(p.features.as_slice());
            labels.extend_from_slice(p.labels.as_slice());
            rows += p.len();
        }
        Ok(Dataset {
            features: Matrix::from_vec(rows, first.width(), features)?,
            labels: Matrix::from_vec(rows, first.num_outputs(), labels)?,
            feature_names: first.feature_names.clone(),
        })
    }
}

/// How a participant's data (or upload) deviates from an honest one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReliabilityProfile {
    Clean,
    /// A fraction of the shard is replaced by uniform noise.
    Unreliable(f64),
    /// Uploads uniform random weights instead of trained ones.
    Malicious,
    /// Holds rows from the held-out attribute range.
    Special,
}

impl ReliabilityProfile {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ReliabilityProfile::Unreliable(p) if !(0.0..=1.0).contains(&p) => Err(Error::param(
                "unreliable fraction",
                format!("must be in [0, 1], got {p}"),
            )),
            _ => Ok(()),
        }
    }
}

pub(crate) fn default_feature_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        let f = Matrix::from_vec(1, 1, vec![1.5]).unwrap();
        let l = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        assert!(Dataset::new(f, l, vec!["a".into()]).is_err());
    }

    #[test]
    fn profile_fraction_checked() {
        assert!(ReliabilityProfile::Unreliable(1.2).validate().is_err());
        assert!(ReliabilityProfile::Unreliable(0.6).validate().is_ok());
    }

    #[test]
    fn profile_json_shape() {
        let p: ReliabilityProfile = serde_json::from_str(r#"{"unreliable":0.6}"#).unwrap();
        assert_eq!(p, ReliabilityProfile::Unreliable(0.6));
        let m: ReliabilityProfile = serde_json::from_str(r#""malicious""#).unwrap();
        assert_eq!(m, ReliabilityProfile::Malicious);
    }
}
