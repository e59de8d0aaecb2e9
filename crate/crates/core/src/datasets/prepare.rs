use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Declared kind of a raw CSV column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Binary,
    /// Regression target.
    Label,
    /// Classification target, one-hot encoded.
    ClassLabel,
    Ignore,
}

/// Column name to kind, as read from the schema JSON file.
pub type Schema = BTreeMap<String, ColumnKind>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    /// Apply `ln(1 + y)` to the regression label before scaling.
    pub log_label: bool,
    /// Regression labels are mapped into `[y_floor, 1]`.
    pub y_floor: f64,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            log_label: false,
            y_floor: super::DEFAULT_Y_FLOOR,
        }
    }
}

/// Unparsed CSV contents.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

pub fn read_csv(path: &Path) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.iter().map(|h| h.trim().to_owned()).collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        rows.push(record?.iter().map(|v| v.trim().to_owned()).collect());
    }
    Ok(RawTable { header, rows })
}

pub fn read_schema(path: &Path) -> Result<Schema> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Encoding {
    Numeric {
        min: f64,
        max: f64,
    },
    /// Sorted two-value vocabulary; the first maps to 0.
    Binary {
        values: Vec<String>,
    },
    Categorical {
        vocabulary: Vec<String>,
    },
    Label {
        min: f64,
        max: f64,
        log: bool,
    },
    ClassLabel {
        classes: Vec<String>,
    },
    Ignore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnEncoding {
    pub name: String,
    #[serde(flatten)]
    pub encoding: Encoding,
}

/// Frozen encodings fitted on the training pass; persisted next to a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub columns: Vec<ColumnEncoding>,
    pub y_floor: f64,
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for col in &self.columns {
            match &col.encoding {
                Encoding::Numeric { .. } | Encoding::Binary { .. } => names.push(col.name.clone()),
                Encoding::Categorical { vocabulary } => {
                    names.extend(vocabulary.iter().map(|v| format!("{}={v}", col.name)))
                }
                _ => {}
            }
        }
        names
    }
}

fn parse_number(column: &str, row: usize, value: &str) -> Result<f64> {
    match value.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Data(format!(
            "column `{column}` row {row}: `{value}` is not a finite number"
        ))),
    }
}

fn label_transform(v: f64, log: bool) -> f64 {
    if log {
        v.ln_1p()
    } else {
        v
    }
}

/// Fits column encodings on `raw`.
pub fn fit(raw: &RawTable, schema: &Schema, opts: &PrepareOptions) -> Result<DatasetManifest> {
    if !(0.0..1.0).contains(&opts.y_floor) {
        return Err(Error::param(
            "y_floor",
            format!("must be in [0, 1), got {}", opts.y_floor),
        ));
    }
    if raw.rows.is_empty() {
        return Err(Error::Empty("prepare"));
    }
    for name in schema.keys() {
        if raw.column_index(name).is_none() {
            return Err(Error::Data(format!("schema column `{name}` missing from CSV")));
        }
    }
    let mut columns = Vec::new();
    let mut targets = 0;
    for (idx, name) in raw.header.iter().enumerate() {
        let kind = *schema
            .get(name)
            .ok_or_else(|| Error::Data(format!("CSV column `{name}` not covered by schema")))?;
        let values = raw.rows.iter().map(|r| r.get(idx).map(String::as_str).unwrap_or(""));
        let encoding = match kind {
            ColumnKind::Numeric | ColumnKind::Label => {
                let log = kind == ColumnKind::Label && opts.log_label;
                let mut min = f64::INFINITY;
                let mut max = f64::NEG_INFINITY;
                for (row, v) in values.enumerate() {
                    let x = label_transform(parse_number(name, row, v)?, log);
                    if !x.is_finite() {
                        return Err(Error::Data(format!("column `{name}` row {row}: log of {v}")));
                    }
                    min = min.min(x);
                    max = max.max(x);
                }
                if kind == ColumnKind::Label {
                    targets += 1;
                    Encoding::Label { min, max, log }
                } else {
                    Encoding::Numeric { min, max }
                }
            }
            ColumnKind::Binary => {
                let vocab: BTreeSet<&str> = values.collect();
                if vocab.len() > 2 {
                    return Err(Error::Data(format!(
                        "binary column `{name}` has {} distinct values",
                        vocab.len()
                    )));
                }
                Encoding::Binary {
                    values: vocab.into_iter().map(str::to_owned).collect(),
                }
            }
            ColumnKind::Categorical => Encoding::Categorical {
                vocabulary: values.collect::<BTreeSet<_>>().into_iter().map(str::to_owned).collect(),
            },
            ColumnKind::ClassLabel => {
                targets += 1;
                Encoding::ClassLabel {
                    classes: values.collect::<BTreeSet<_>>().into_iter().map(str::to_owned).collect(),
                }
            }
            ColumnKind::Ignore => Encoding::Ignore,
        };
        columns.push(ColumnEncoding {
            name: name.clone(),
            encoding,
        });
    }
    if targets != 1 {
        return Err(Error::Data(format!(
            "schema must declare exactly one label column, found {targets}"
        )));
    }
    Ok(DatasetManifest {
        columns,
        y_floor: opts.y_floor,
        seed: None,
    })
}

fn min_max(x: f64, min: f64, max: f64) -> f64 {
    if max > min {
        ((x - min) / (max - min)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Encodes `raw` with previously fitted encodings.
pub fn transform(raw: &RawTable, manifest: &DatasetManifest) -> Result<Dataset> {
    if raw.rows.is_empty() {
        return Err(Error::Empty("transform"));
    }
    let mut idx = Vec::with_capacity(manifest.columns.len());
    for col in &manifest.columns {
        let i = raw
            .column_index(&col.name)
            .ok_or_else(|| Error::Data(format!("column `{}` missing", col.name)))?;
        idx.push(i);
        if let Encoding::Numeric { min, max } = col.encoding {
            if max <= min {
                warn!("numeric column `{}` is constant; encoding as 0", col.name);
            }
        }
    }
    let feature_names = manifest.feature_names();
    let outputs = manifest
        .columns
        .iter()
        .find_map(|c| match &c.encoding {
            Encoding::Label { .. } => Some(1),
            Encoding::ClassLabel { classes } => Some(classes.len()),
            _ => None,
        })
        .ok_or_else(|| Error::Data("manifest has no label column".into()))?;

    let n = raw.rows.len();
    let mut features = Vec::with_capacity(n * feature_names.len());
    let mut labels = Vec::with_capacity(n * outputs);
    for (row_no, row) in raw.rows.iter().enumerate() {
        for (col, &i) in manifest.columns.iter().zip(&idx) {
            let v = row.get(i).map(String::as_str).unwrap_or("");
            let unseen = || Error::UnseenCategory {
                column: col.name.clone(),
                value: v.to_owned(),
            };
            match &col.encoding {
                Encoding::Numeric { min, max } => {
                    features.push(min_max(parse_number(&col.name, row_no, v)?, *min, *max))
                }
                Encoding::Binary { values } => {
                    let pos = values.iter().position(|x| x == v).ok_or_else(unseen)?;
                    features.push(pos as f64);
                }
                Encoding::Categorical { vocabulary } => {
                    let pos = vocabulary.iter().position(|x| x == v).ok_or_else(unseen)?;
                    features.extend((0..vocabulary.len()).map(|k| if k == pos { 1.0 } else { 0.0 }));
                }
                Encoding::Label { min, max, log } => {
                    let y = label_transform(parse_number(&col.name, row_no, v)?, *log);
                    let scaled = min_max(y, *min, *max);
                    labels.push(manifest.y_floor + (1.0 - manifest.y_floor) * scaled);
                }
                Encoding::ClassLabel { classes } => {
                    let pos = classes.iter().position(|x| x == v).ok_or_else(unseen)?;
                    labels.extend((0..classes.len()).map(|k| if k == pos { 1.0 } else { 0.0 }));
                }
                Encoding::Ignore => {}
            }
        }
    }
    let width = feature_names.len();
    Dataset::new(
        Matrix::from_vec(n, width, features)?,
        Matrix::from_vec(n, outputs, labels)?,
        feature_names,
    )
}

/// Fits encodings on `raw` and applies them.
///
/// Binary columns become 0/1, categorical columns become indicator blocks,
/// numeric columns are min-max scaled, and the regression label is scaled
/// into `[y_floor, 1]` (after `ln(1 + y)` when requested).
pub fn prepare(raw: &RawTable, schema: &Schema, opts: &PrepareOptions) -> Result<(Dataset, DatasetManifest)> {
    let manifest = fit(raw, schema, opts)?;
    let ds = transform(raw, &manifest)?;
    Ok((ds, manifest))
}
