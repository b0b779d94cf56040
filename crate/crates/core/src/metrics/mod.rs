//! Validity, sparsity, target-conditional MMD and the nearest-neighbour
//! baseline.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{default_condition, satisfies, ConstraintSet, FeatureCondition};
use crate::data::{FeatureValue, InstanceRecord, TabularSchema};
use crate::error::{Error, Result};
use crate::generator::CounterfactualResult;
use crate::nn::{LayerSpec, Matrix, Network};

pub fn validity(results: &[CounterfactualResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Usage("validity of an empty result set".into()));
    }
    Ok(results.iter().filter(|r| r.valid).count() as f64 / results.len() as f64)
}

/// Fraction of categorical features whose value changed.
pub fn sparsity_l0(schema: &TabularSchema, x: &InstanceRecord, cf: &InstanceRecord) -> Result<f64> {
    let n = schema.num_categorical();
    if n == 0 {
        return Err(Error::UndefinedMetric("L0 needs at least one categorical feature".into()));
    }
    let changed = schema.categorical().filter(|&(j, _)| x.0[j] != cf.0[j]).count();
    Ok(changed as f64 / n as f64)
}

/// Mean absolute standardized difference over numerical features.
pub fn sparsity_l1(schema: &TabularSchema, x: &InstanceRecord, cf: &InstanceRecord) -> Result<f64> {
    let n = schema.num_numerical();
    if n == 0 {
        return Err(Error::UndefinedMetric("L1 needs at least one numerical feature".into()));
    }
    let total: f64 = schema
        .numerical()
        .map(|(j, st)| (st.standardize(num(&x.0[j])) - st.standardize(num(&cf.0[j]))).abs())
        .sum();
    Ok(total / n as f64)
}

fn num(v: &FeatureValue) -> f64 {
    v.as_numerical().expect("numerical feature")
}

/// `L1 + L0` with each term averaged over its features; a kind the schema
/// lacks contributes nothing.
pub fn mixed_distance(schema: &TabularSchema, a: &InstanceRecord, b: &InstanceRecord) -> f64 {
    let l1 = sparsity_l1(schema, a, b).unwrap_or(0.0);
    let l0 = sparsity_l0(schema, a, b).unwrap_or(0.0);
    l1 + l0
}

/// Index of the closest training row that the black box assigns to
/// `target` and that satisfies `condition`. Ties go to the lowest index.
pub fn mo_baseline(
    schema: &TabularSchema,
    x: &InstanceRecord,
    target: usize,
    condition: &FeatureCondition,
    train: &[InstanceRecord],
    train_predictions: &[usize],
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (cand, &p)) in train.iter().zip(train_predictions).enumerate() {
        if p != target || !satisfies(schema, x, cand, condition) {
            continue;
        }
        let d = mixed_distance(schema, x, cand);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// MO counterfactuals for resolved targets. Queries with no complying
/// target-class training row return the original, marked invalid.
pub fn mo_results(
    schema: &TabularSchema,
    instances: &[InstanceRecord],
    original_classes: &[usize],
    targets: &[usize],
    constraints: &ConstraintSet,
    train: &[InstanceRecord],
    train_predictions: &[usize],
) -> Result<Vec<CounterfactualResult>> {
    if original_classes.len() != instances.len() || targets.len() != instances.len() {
        return Err(Error::Usage(format!(
            "{} instances with {} labels and {} targets",
            instances.len(),
            original_classes.len(),
            targets.len()
        )));
    }
    if train.len() != train_predictions.len() {
        return Err(Error::Usage("one prediction per training row is required".into()));
    }
    Ok(instances
        .iter()
        .zip(original_classes.iter().zip(targets))
        .map(|(x, (&y_m, &t))| {
            let condition = default_condition(schema, x, constraints);
            let (counterfactual, predicted) = match mo_baseline(schema, x, t, &condition, train, train_predictions) {
                Some(i) => (train[i].clone(), train_predictions[i]),
                None => (x.clone(), y_m),
            };
            CounterfactualResult {
                original: x.clone(),
                counterfactual,
                original_class: y_m,
                target: t,
                predicted,
                valid: predicted == t,
                condition,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    /// Widths of the random reduction layers, ReLU between them.
    pub dims: Vec<usize>,
    pub seed: u64,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            dims: vec![32, 16, 5],
            seed: 0,
        }
    }
}

/// Randomly initialized, never trained projection of encoded rows.
#[derive(Debug, Clone)]
pub struct Reducer {
    net: Network,
}

impl Reducer {
    pub fn new(input_dim: usize, config: &MmdConfig) -> Result<Self> {
        if config.dims.is_empty() || config.dims.contains(&0) {
            return Err(Error::Config("reduction widths must be positive".into()));
        }
        let mut specs = Vec::new();
        let mut prev = input_dim;
        for (i, &d) in config.dims.iter().enumerate() {
            if i > 0 {
                specs.push(LayerSpec::Relu { dim: prev });
            }
            specs.push(LayerSpec::Dense { in_dim: prev, out_dim: d });
            prev = d;
        }
        let net = Network::new(specs, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        Ok(Reducer { net })
    }

    pub fn reduce(&self, encoded: &Matrix) -> Result<Matrix> {
        self.net.predict(encoded)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the pooled rows. Falls back to
/// the mean of the non-zero distances when more than half coincide, and to
/// 1 when all rows are identical.
pub fn median_bandwidth(a: &Matrix, b: &Matrix) -> f64 {
    let pooled: Vec<&[f64]> = a.iter_rows().chain(b.iter_rows()).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if m > 0.0 {
        return m;
    }
    let nz: Vec<f64> = d.into_iter().filter(|&v| v > 0.0).collect();
    if nz.is_empty() {
        1.0
    } else {
        nz.iter().sum::<f64>() / nz.len() as f64
    }
}

fn kernel_mean(a: &Matrix, b: &Matrix, gamma: f64) -> f64 {
    let mut s = 0.0;
    for ra in a.iter_rows() {
        for rb in b.iter_rows() {
            s += (-gamma * sq_dist(ra, rb)).exp();
        }
    }
    s / (a.rows() * b.rows()) as f64
}

/// Biased squared MMD under an RBF kernel `exp(-|a-b|² / 2σ²)`.
pub fn mmd2(a: &Matrix, b: &Matrix, sigma: f64) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        let side = if a.rows() == 0 { "first" } else { "second" };
        return Err(Error::Usage(format!("MMD with an empty {side} sample")));
    }
    if a.cols() != b.cols() {
        return Err(Error::Dimension(format!("MMD between widths {} and {}", a.cols(), b.cols())));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("kernel bandwidth {sigma} must be positive")));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let v = kernel_mean(a, a, gamma) + kernel_mean(b, b, gamma) - 2.0 * kernel_mean(a, b, gamma);
    Ok(v.max(0.0))
}

/// MMD² between encoded counterfactuals and encoded reference rows after
/// the random reduction, with a median-heuristic bandwidth.
pub fn conditional_mmd(counterfactuals: &Matrix, reference: &Matrix, reducer: &Reducer) -> Result<f64> {
    if counterfactuals.rows() == 0 {
        return Err(Error::Usage("MMD with no counterfactuals".into()));
    }
    if reference.rows() == 0 {
        return Err(Error::Usage("MMD with no reference rows".into()));
    }
    let a = reducer.reduce(counterfactuals)?;
    let b = reducer.reduce(reference)?;
    mmd2(&a, &b, median_bandwidth(&a, &b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMmd {
    pub class: usize,
    pub counterfactuals: usize,
    pub reference: usize,
    pub mmd2: Option<f64>,
}

/// Sparsity averaged over some subset of results. `None` where the metric
/// is undefined for the schema or the subset is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sparsity {
    pub count: usize,
    pub l0: Option<f64>,
    pub l1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub total: usize,
    pub valid: usize,
    pub validity: f64,
    /// Over valid counterfactuals only.
    pub sparsity_valid: Sparsity,
    pub sparsity_all: Sparsity,
    pub mmd: Vec<ClassMmd>,
}

fn mean_sparsity<'a>(schema: &TabularSchema, rs: impl Iterator<Item = &'a CounterfactualResult>) -> Sparsity {
    let (mut n, mut l0, mut l1) = (0usize, 0.0, 0.0);
    for r in rs {
        n += 1;
        l0 += sparsity_l0(schema, &r.original, &r.counterfactual).unwrap_or(0.0);
        l1 += sparsity_l1(schema, &r.original, &r.counterfactual).unwrap_or(0.0);
    }
    let avg = |s: f64, defined: bool| (defined && n > 0).then(|| s / n as f64);
    Sparsity {
        count: n,
        l0: avg(l0, schema.num_categorical() > 0),
        l1: avg(l1, schema.num_numerical() > 0),
    }
}

/// Reference rows for class `t` are the training rows the black box assigns
/// to `t`; all counterfactuals aimed at `t` are compared against them.
pub fn evaluate(
    method: &str,
    results: &[CounterfactualResult],
    schema: &TabularSchema,
    train: &[InstanceRecord],
    train_predictions: &[usize],
    reducer: &Reducer,
) -> Result<EvaluationReport> {
    let v = validity(results)?;
    let mut mmd = Vec::with_capacity(schema.num_classes);
    for class in 0..schema.num_classes {
        let cfs: Vec<InstanceRecord> = results
            .iter()
            .filter(|r| r.target == class)
            .map(|r| r.counterfactual.clone())
            .collect();
        let refs: Vec<InstanceRecord> = train
            .iter()
            .zip(train_predictions)
            .filter(|&(_, &p)| p == class)
            .map(|(r, _)| r.clone())
            .collect();
        let value = if cfs.is_empty() || refs.is_empty() {
            None
        } else {
            Some(conditional_mmd(&schema.encode_batch(&cfs), &schema.encode_batch(&refs), reducer)?)
        };
        mmd.push(ClassMmd {
            class,
            counterfactuals: cfs.len(),
            reference: refs.len(),
            mmd2: value,
        });
    }
    Ok(EvaluationReport {
        method: method.to_string(),
        total: results.len(),
        valid: results.iter().filter(|r| r.valid).count(),
        validity: v,
        sparsity_valid: mean_sparsity(schema, results.iter().filter(|r| r.valid)),
        sparsity_all: mean_sparsity(schema, results.iter()),
        mmd,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    Some((m, var.sqrt()))
}

fn cell(values: &[Option<f64>], scale: f64) -> String {
    let present: Option<Vec<f64>> = values.iter().copied().collect();
    match present.as_deref().and_then(mean_std) {
        Some((m, s)) => format!("{:.2}±{:.2}", m * scale, s * scale),
        None => "-".to_string(),
    }
}

/// Aligned table with one row per method and `mean±std` cells over the
/// reports given for that method (one per seed). Validity is in percent.
pub fn render_table(rows: &[(String, Vec<EvaluationReport>)], num_classes: usize) -> String {
    let mut header = vec!["method".to_string(), "validity".into(), "L0 (valid)".into(), "L1 (valid)".into()];
    header.extend(["L0 (all)".into(), "L1 (all)".into()]);
    header.extend((0..num_classes).map(|c| format!("MMD² class {c}")));
    let mut table = vec![header];
    for (method, reports) in rows {
        let col = |f: &dyn Fn(&EvaluationReport) -> Option<f64>| reports.iter().map(f).collect::<Vec<_>>();
        let mut line = vec![
            method.clone(),
            cell(&col(&|r| Some(r.validity)), 100.0),
            cell(&col(&|r| r.sparsity_valid.l0), 1.0),
            cell(&col(&|r| r.sparsity_valid.l1), 1.0),
            cell(&col(&|r| r.sparsity_all.l0), 1.0),
            cell(&col(&|r| r.sparsity_all.l1), 1.0),
        ];
        for c in 0..num_classes {
            line.push(cell(&col(&|r| r.mmd.get(c).and_then(|m| m.mmd2)), 1.0));
        }
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|j| table.iter().map(|row| row[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            let _ = writeln!(out, "{}", rule.join("  "));
        }
    }
    out
}
