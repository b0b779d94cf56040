//! Tabular ingestion, schema fitting, splits and class-balanced sampling.

mod schema;
pub mod synthetic;

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use schema::{
    DeclaredKind, Feature, FeatureDecl, FeatureKind, FeatureValue, InstanceRecord,
    NumericalStats, SchemaFile, TabularSchema,
};

use crate::error::{Error, Result};
use crate::nn::Matrix;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// Parsed CSV rows with their class labels, before any statistics are fitted.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub schema_file: SchemaFile,
    pub records: Vec<InstanceRecord>,
    pub labels: Vec<usize>,
}

pub fn read_schema_file(path: impl AsRef<Path>) -> Result<SchemaFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SchemaFile::from_json(&text)
}

/// Reads a CSV file and validates every row against the schema file.
pub fn load_csv(path: impl AsRef<Path>, schema_path: impl AsRef<Path>) -> Result<RawTable> {
    let schema_file = read_schema_file(schema_path)?;
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, schema_file)
}

/// Row numbers in errors count data rows from 1, excluding the header.
pub fn parse_csv<R: std::io::Read>(reader: R, schema_file: SchemaFile) -> Result<RawTable> {
    let (records, labels) = parse_rows(reader, &schema_file, true)?;
    Ok(RawTable {
        schema_file,
        records,
        labels,
    })
}

/// Feature columns only; a label column, if present, is ignored.
pub fn parse_instances<R: std::io::Read>(reader: R, schema_file: &SchemaFile) -> Result<Vec<InstanceRecord>> {
    Ok(parse_rows(reader, schema_file, false)?.0)
}

fn parse_rows<R: std::io::Read>(
    reader: R,
    schema_file: &SchemaFile,
    with_labels: bool,
) -> Result<(Vec<InstanceRecord>, Vec<usize>)> {
    schema_file.validate()?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let column_of = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("CSV header has no column {name:?}")))
    };
    let feature_cols = schema_file
        .features
        .iter()
        .map(|f| column_of(&f.name))
        .collect::<Result<Vec<_>>>()?;
    let label_col = if with_labels {
        Some(column_of(&schema_file.label_column)?)
    } else {
        None
    };

    let vocab: Vec<Option<HashMap<&str, usize>>> = schema_file
        .features
        .iter()
        .map(|f| {
            f.categories
                .as_ref()
                .map(|c| c.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect())
        })
        .collect();
    let class_names = schema_file.class_names();
    let class_lookup: HashMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mut records = Vec::new();
    let mut labels = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let ingest = |column: &str, message: String| Error::Ingestion {
            row: row_no,
            column: column.to_string(),
            message,
        };
        let mut values = Vec::with_capacity(feature_cols.len());
        for ((decl, &col), vocab) in schema_file.features.iter().zip(&feature_cols).zip(&vocab) {
            let cell = row.get(col).unwrap_or("");
            if cell.is_empty() {
                return Err(ingest(&decl.name, "missing value".into()));
            }
            match vocab {
                Some(map) => {
                    let k = map
                        .get(cell)
                        .ok_or_else(|| ingest(&decl.name, format!("unknown category {cell:?}")))?;
                    values.push(FeatureValue::Categorical(*k));
                }
                None => {
                    let v: f64 = cell
                        .parse()
                        .ok()
                        .filter(|v: &f64| v.is_finite())
                        .ok_or_else(|| ingest(&decl.name, format!("{cell:?} is not a finite number")))?;
                    if decl.integer && v.fract() != 0.0 {
                        return Err(ingest(&decl.name, format!("{cell:?} is not an integer")));
                    }
                    values.push(FeatureValue::Numerical(v));
                }
            }
        }
        if let Some(col) = label_col {
            let label_cell = row.get(col).unwrap_or("");
            let label = *class_lookup
                .get(label_cell)
                .ok_or_else(|| ingest(&schema_file.label_column, format!("unknown label {label_cell:?}")))?;
            labels.push(label);
        }
        records.push(InstanceRecord(values));
    }
    if records.is_empty() {
        return Err(Error::Format("CSV has no data rows".into()));
    }
    Ok((records, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub train_fraction: f64,
    pub seed: u64,
}

impl DatasetSplit {
    /// Seeded shuffle; the first `round(fraction * n)` rows go to train. Both
    /// index lists are returned sorted.
    pub fn new(n: usize, train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction {train_fraction} must lie in (0, 1)"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((n as f64) * train_fraction).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(Error::Config(format!(
                "{n} rows cannot be split with train fraction {train_fraction}"
            )));
        }
        let mut train = idx[..n_train].to_vec();
        let mut test = idx[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok(DatasetSplit {
            train,
            test,
            train_fraction,
            seed,
        })
    }
}

/// Fits ranges and standardization statistics on the given rows.
pub fn fit_schema(file: &SchemaFile, records: &[InstanceRecord], rows: &[usize]) -> Result<TabularSchema> {
    if rows.is_empty() {
        return Err(Error::Config("cannot fit a schema on zero rows".into()));
    }
    let mut features = Vec::with_capacity(file.features.len());
    for (j, decl) in file.features.iter().enumerate() {
        let kind = match decl.kind {
            DeclaredKind::Categorical => FeatureKind::Categorical {
                categories: decl.categories.clone().unwrap_or_default(),
            },
            DeclaredKind::Numerical => {
                let values: Vec<f64> = rows
                    .iter()
                    .map(|&r| {
                        records[r].0[j]
                            .as_numerical()
                            .expect("records validated against the schema file")
                    })
                    .collect();
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let std = var.sqrt();
                if !(std > 0.0) {
                    return Err(Error::Format(format!(
                        "numerical feature {:?} is constant on the training split",
                        decl.name
                    )));
                }
                FeatureKind::Numerical(NumericalStats {
                    a_min: values.iter().copied().fold(f64::INFINITY, f64::min),
                    a_max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    mean,
                    std,
                    integer: decl.integer,
                })
            }
        };
        features.push(Feature {
            name: decl.name.clone(),
            kind,
        });
    }
    Ok(TabularSchema {
        features,
        num_classes: file.target_classes,
        class_names: file.class_names(),
        label_column: file.label_column.clone(),
    })
}

/// All rows of a table with a split and a schema fitted on its train part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: TabularSchema,
    pub records: Vec<InstanceRecord>,
    pub labels: Vec<usize>,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn load(
        csv_path: impl AsRef<Path>,
        schema_path: impl AsRef<Path>,
        train_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::from_table(load_csv(csv_path, schema_path)?, train_fraction, seed)
    }

    pub fn from_table(table: RawTable, train_fraction: f64, seed: u64) -> Result<Self> {
        let split = DatasetSplit::new(table.records.len(), train_fraction, seed)?;
        let schema = fit_schema(&table.schema_file, &table.records, &split.train)?;
        Ok(Dataset {
            schema,
            records: table.records,
            labels: table.labels,
            split,
        })
    }

    pub fn train_records(&self) -> Vec<InstanceRecord> {
        self.split.train.iter().map(|&i| self.records[i].clone()).collect()
    }

    pub fn test_records(&self) -> Vec<InstanceRecord> {
        self.split.test.iter().map(|&i| self.records[i].clone()).collect()
    }

    pub fn train_labels(&self) -> Vec<usize> {
        self.split.train.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn test_labels(&self) -> Vec<usize> {
        self.split.test.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn encode_rows(&self, rows: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(rows.len(), self.schema.encoded_dim());
        for (r, &i) in rows.iter().enumerate() {
            self.schema.encode_into(&self.records[i], m.row_mut(r));
        }
        m
    }
}

/// Draws row positions with probability proportional to 1 / count(class).
///
/// Equivalent formulation used here: pick a class uniformly, then a row of
/// that class uniformly.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    by_class: Vec<Vec<usize>>,
}

impl BalancedSampler {
    /// `labels[i]` is the class of position `i`; every class below
    /// `num_classes` needs at least one row.
    pub fn new(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            let slot = by_class
                .get_mut(y)
                .ok_or_else(|| Error::Config(format!("label {y} outside {num_classes} classes")))?;
            slot.push(i);
        }
        if let Some(empty) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!("class {empty} has no examples")));
        }
        Ok(BalancedSampler { by_class })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let class = &self.by_class[rng.random_range(0..self.by_class.len())];
        class[rng.random_range(0..class.len())]
    }

    pub fn batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        (0..batch_size).map(|_| self.sample(rng)).collect()
    }
}

/// One-shot helper around [`BalancedSampler`].
pub fn balanced_batch<R: Rng + ?Sized>(
    labels: &[usize],
    num_classes: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    Ok(BalancedSampler::new(labels, num_classes)?.batch(batch_size, rng))
}
