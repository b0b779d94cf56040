use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Feature declaration as written in a schema file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDecl {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: DeclaredKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    /// Numerical features only: values are whole numbers and generated values
    /// are rounded.
    #[serde(default)]
    pub integer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeclaredKind {
    Numerical,
    Categorical,
}

fn default_label_column() -> String {
    "label".to_string()
}

/// The on-disk schema document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaFile {
    pub features: Vec<FeatureDecl>,
    pub target_classes: usize,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    /// Optional label spellings; without them labels are class indices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

impl SchemaFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: SchemaFile = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("schema file: {e}")))?;
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Config("schema declares no features".into()));
        }
        if self.target_classes < 1 {
            return Err(Error::Config("target_classes must be at least 1".into()));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.target_classes {
                return Err(Error::Config(format!(
                    "{} class names for {} classes",
                    names.len(),
                    self.target_classes
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) || f.name == self.label_column {
                return Err(Error::Config(format!("duplicate column name {:?}", f.name)));
            }
            match f.kind {
                DeclaredKind::Categorical => {
                    let cats = f.categories.as_ref().ok_or_else(|| {
                        Error::Config(format!("categorical feature {:?} has no categories", f.name))
                    })?;
                    if cats.is_empty() {
                        return Err(Error::Config(format!("feature {:?}: empty vocabulary", f.name)));
                    }
                    let unique: std::collections::HashSet<_> = cats.iter().collect();
                    if unique.len() != cats.len() {
                        return Err(Error::Config(format!(
                            "feature {:?}: duplicate categories",
                            f.name
                        )));
                    }
                }
                DeclaredKind::Numerical => {
                    if f.categories.is_some() {
                        return Err(Error::Config(format!(
                            "numerical feature {:?} lists categories",
                            f.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.class_names
            .clone()
            .unwrap_or_else(|| (0..self.target_classes).map(|c| c.to_string()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericalStats {
    pub a_min: f64,
    pub a_max: f64,
    pub mean: f64,
    pub std: f64,
    pub integer: bool,
}

impl NumericalStats {
    pub fn range(&self) -> f64 {
        self.a_max - self.a_min
    }

    pub fn standardize(&self, value: f64) -> f64 {
        (value - self.mean) / self.std
    }

    pub fn unstandardize(&self, value: f64) -> f64 {
        value * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeatureKind {
    Numerical(NumericalStats),
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub kind: FeatureKind,
}

/// Schema fitted on a training split: declared vocabularies plus numerical
/// ranges and standardization statistics.
///
/// Encoded vectors place every numerical feature first (in feature order),
/// followed by the one-hot blocks of the categorical features (in feature
/// order). Condition vectors use the same grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub features: Vec<Feature>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub label_column: String,
}

impl TabularSchema {
    pub fn numerical(&self) -> impl Iterator<Item = (usize, &NumericalStats)> {
        self.features.iter().enumerate().filter_map(|(i, f)| match &f.kind {
            FeatureKind::Numerical(s) => Some((i, s)),
            _ => None,
        })
    }

    pub fn categorical(&self) -> impl Iterator<Item = (usize, &[String])> {
        self.features.iter().enumerate().filter_map(|(i, f)| match &f.kind {
            FeatureKind::Categorical { categories } => Some((i, categories.as_slice())),
            _ => None,
        })
    }

    pub fn num_numerical(&self) -> usize {
        self.numerical().count()
    }

    pub fn num_categorical(&self) -> usize {
        self.categorical().count()
    }

    pub fn encoded_dim(&self) -> usize {
        self.num_numerical() + self.categorical().map(|(_, c)| c.len()).sum::<usize>()
    }

    /// Column ranges of the one-hot blocks, one per categorical feature.
    pub fn categorical_blocks(&self) -> Vec<Range<usize>> {
        let mut offset = self.num_numerical();
        self.categorical()
            .map(|(_, cats)| {
                let r = offset..offset + cats.len();
                offset += cats.len();
                r
            })
            .collect()
    }

    /// Width of a condition vector: two slots per numerical feature plus one
    /// mask bit per category.
    pub fn condition_dim(&self) -> usize {
        2 * self.num_numerical() + self.categorical().map(|(_, c)| c.len()).sum::<usize>()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn validate_record(&self, record: &InstanceRecord) -> Result<()> {
        if record.0.len() != self.features.len() {
            return Err(Error::Dimension(format!(
                "record has {} values for {} features",
                record.0.len(),
                self.features.len()
            )));
        }
        for (f, v) in self.features.iter().zip(&record.0) {
            match (&f.kind, v) {
                (FeatureKind::Numerical(_), FeatureValue::Numerical(x)) if x.is_finite() => {}
                (FeatureKind::Categorical { categories }, FeatureValue::Categorical(k))
                    if *k < categories.len() => {}
                _ => {
                    return Err(Error::Format(format!(
                        "value {v:?} is invalid for feature {:?}",
                        f.name
                    )))
                }
            }
        }
        Ok(())
    }

    /// Standardized numericals followed by one-hot blocks.
    pub fn encode(&self, record: &InstanceRecord) -> Vec<f64> {
        let mut out = vec![0.0; self.encoded_dim()];
        self.encode_into(record, &mut out);
        out
    }

    pub fn encode_into(&self, record: &InstanceRecord, out: &mut [f64]) {
        let mut num_slot = 0;
        let mut offset = self.num_numerical();
        for (f, v) in self.features.iter().zip(&record.0) {
            match (&f.kind, v) {
                (FeatureKind::Numerical(s), FeatureValue::Numerical(x)) => {
                    out[num_slot] = s.standardize(*x);
                    num_slot += 1;
                }
                (FeatureKind::Categorical { categories }, FeatureValue::Categorical(k)) => {
                    out[offset..offset + categories.len()].fill(0.0);
                    out[offset + k] = 1.0;
                    offset += categories.len();
                }
                _ => panic!("record does not match schema; validate records at ingestion"),
            }
        }
    }

    pub fn encode_batch(&self, records: &[InstanceRecord]) -> Matrix {
        let dim = self.encoded_dim();
        let mut m = Matrix::zeros(records.len(), dim);
        for (r, rec) in records.iter().enumerate() {
            self.encode_into(rec, m.row_mut(r));
        }
        m
    }

    /// Inverts [`TabularSchema::encode`]. One-hot blocks must have a unique
    /// maximum; integer numericals are rounded.
    pub fn decode_exact(&self, encoded: &[f64]) -> Result<InstanceRecord> {
        if encoded.len() != self.encoded_dim() {
            return Err(Error::Dimension(format!(
                "encoded width {} vs schema width {}",
                encoded.len(),
                self.encoded_dim()
            )));
        }
        let mut num_slot = 0;
        let mut offset = self.num_numerical();
        let mut values = Vec::with_capacity(self.features.len());
        for f in &self.features {
            match &f.kind {
                FeatureKind::Numerical(s) => {
                    let mut v = s.unstandardize(encoded[num_slot]);
                    if s.integer {
                        v = v.round();
                    }
                    values.push(FeatureValue::Numerical(v));
                    num_slot += 1;
                }
                FeatureKind::Categorical { categories } => {
                    let block = &encoded[offset..offset + categories.len()];
                    let max = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut winners = block.iter().enumerate().filter(|(_, &v)| v == max);
                    let (k, _) = winners.next().expect("non-empty vocabulary");
                    if winners.next().is_some() {
                        return Err(Error::Format(format!(
                            "one-hot block for {:?} has no unique maximum",
                            f.name
                        )));
                    }
                    values.push(FeatureValue::Categorical(k));
                    offset += categories.len();
                }
            }
        }
        Ok(InstanceRecord(values))
    }

    /// SHA-256 over the canonical JSON form of the fitted schema.
    pub fn fingerprint(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("schema serializes");
        Sha256::digest(&json).into()
    }

    pub fn fingerprint_hex(&self) -> String {
        crate::hex(&self.fingerprint())
    }

    /// Renders a record with category names, for reports.
    pub fn display_values(&self, record: &InstanceRecord) -> Vec<String> {
        self.features
            .iter()
            .zip(&record.0)
            .map(|(f, v)| match (&f.kind, v) {
                (FeatureKind::Categorical { categories }, FeatureValue::Categorical(k)) => {
                    categories[*k].clone()
                }
                (FeatureKind::Numerical(s), FeatureValue::Numerical(x)) if s.integer => {
                    format!("{}", *x as i64)
                }
                (_, FeatureValue::Numerical(x)) => format!("{x}"),
                (_, FeatureValue::Categorical(k)) => k.to_string(),
            })
            .collect()
    }
}

/// In JSON a category index is a bare integer and a numerical value always
/// carries a decimal point or exponent, so the untagged form round-trips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Categorical(usize),
    Numerical(f64),
}

impl FeatureValue {
    pub fn as_numerical(&self) -> Option<f64> {
        match *self {
            FeatureValue::Numerical(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_category(&self) -> Option<usize> {
        match *self {
            FeatureValue::Categorical(k) => Some(k),
            _ => None,
        }
    }
}

/// One row in original feature space, in schema feature order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord(pub Vec<FeatureValue>);
