//! Seeded synthetic data: two separable Gaussian clusters plus an integer
//! feature and a categorical feature that carry no class signal.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DeclaredKind, FeatureDecl, FeatureValue, InstanceRecord, RawTable, SchemaFile};
use crate::error::{Error, Result};

pub const BLOB_CENTER: f64 = 2.0;
const COLORS: [&str; 3] = ["red", "green", "blue"];

pub fn blobs_schema() -> SchemaFile {
    let num = |name: &str, integer| FeatureDecl {
        name: name.into(),
        kind: DeclaredKind::Numerical,
        categories: None,
        integer,
    };
    SchemaFile {
        features: vec![
            num("x1", false),
            num("x2", false),
            num("count", true),
            FeatureDecl {
                name: "color".into(),
                kind: DeclaredKind::Categorical,
                categories: Some(COLORS.iter().map(|s| s.to_string()).collect()),
                integer: false,
            },
        ],
        target_classes: 2,
        label_column: "label".into(),
        class_names: Some(vec!["neg".into(), "pos".into()]),
    }
}

/// `n` rows alternating between class 0 centred at (-2,-2) and class 1 at
/// (2,2), unit variance.
pub fn gaussian_blobs(n: usize, seed: u64) -> RawTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut records = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let c = if y == 1 { BLOB_CENTER } else { -BLOB_CENTER };
        let x1 = round4(c + noise.sample(&mut rng));
        let x2 = round4(c + noise.sample(&mut rng));
        let count = rng.random_range(0..=10) as f64;
        let color = rng.random_range(0..COLORS.len());
        records.push(InstanceRecord(vec![
            FeatureValue::Numerical(x1),
            FeatureValue::Numerical(x2),
            FeatureValue::Numerical(count),
            FeatureValue::Categorical(color),
        ]));
        labels.push(y);
    }
    RawTable {
        schema_file: blobs_schema(),
        records,
        labels,
    }
}

// Four decimals keep the CSV text exact under round trips.
fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// Writes a table as CSV (features in schema order, then the label) and its
/// schema as JSON.
pub fn write_table(table: &RawTable, csv_path: &Path, schema_path: &Path) -> Result<()> {
    let file = &table.schema_file;
    let class_names = file.class_names();
    let mut w = csv::Writer::from_path(csv_path)?;
    let mut header: Vec<&str> = file.features.iter().map(|f| f.name.as_str()).collect();
    header.push(&file.label_column);
    w.write_record(&header)?;
    for (rec, &y) in table.records.iter().zip(&table.labels) {
        let mut row: Vec<String> = rec
            .0
            .iter()
            .zip(&file.features)
            .map(|(v, decl)| match v {
                FeatureValue::Numerical(x) => format!("{x}"),
                FeatureValue::Categorical(k) => decl.categories.as_ref().expect("categorical")[*k].clone(),
            })
            .collect();
        row.push(class_names[y].clone());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let json = serde_json::to_string_pretty(file)?;
    std::fs::write(schema_path, json + "\n").map_err(|e| Error::io(schema_path, e))?;
    Ok(())
}
