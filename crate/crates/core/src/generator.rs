//! Batch counterfactual generation with a trained actor.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{HeadLayout, TabularAutoencoder};
use crate::blackbox::BlackBox;
use crate::conditioning::{
    default_condition, encode_condition, postprocess, sample_condition, sample_other_target, ConstraintSet,
    FeatureCondition,
};
use crate::ddpg::{state_dim, write_state};
use crate::data::{InstanceRecord, TabularSchema};
use crate::error::{Error, Result};
use crate::nn::{Matrix, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    Class(usize),
    /// A class other than the current prediction, drawn uniformly.
    AnyOther,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub original: InstanceRecord,
    pub counterfactual: InstanceRecord,
    /// Black-box label of the original.
    pub original_class: usize,
    pub target: usize,
    /// Black-box label of the counterfactual.
    pub predicted: usize,
    pub valid: bool,
    pub condition: FeatureCondition,
}

/// Trained components that share one schema.
pub struct Explainer<'a> {
    schema: &'a TabularSchema,
    actor: &'a Network,
    autoencoder: &'a TabularAutoencoder,
    blackbox: &'a dyn BlackBox,
}

impl<'a> Explainer<'a> {
    pub fn new(
        schema: &'a TabularSchema,
        actor: &'a Network,
        autoencoder: &'a TabularAutoencoder,
        blackbox: &'a dyn BlackBox,
    ) -> Result<Self> {
        if autoencoder.layout() != &HeadLayout::from_schema(schema) {
            return Err(Error::Config("autoencoder does not match the schema".into()));
        }
        let expected = state_dim(autoencoder.latent_dim(), schema.num_classes, schema.condition_dim());
        if actor.in_dim() != expected || actor.out_dim() != autoencoder.latent_dim() {
            return Err(Error::Config(format!(
                "actor maps {} -> {}, schema and autoencoder need {expected} -> {}",
                actor.in_dim(),
                actor.out_dim(),
                autoencoder.latent_dim()
            )));
        }
        Ok(Explainer {
            schema,
            actor,
            autoencoder,
            blackbox,
        })
    }

    fn resolve_targets<R: Rng + ?Sized>(&self, y_m: &[usize], targets: &[TargetSpec], rng: &mut R) -> Result<Vec<usize>> {
        if targets.len() != y_m.len() {
            return Err(Error::Usage(format!("{} targets for {} instances", targets.len(), y_m.len())));
        }
        let k = self.schema.num_classes;
        y_m.iter()
            .zip(targets)
            .map(|(&m, t)| match *t {
                TargetSpec::Class(c) if c < k => Ok(c),
                TargetSpec::Class(c) => Err(Error::Usage(format!("target class {c} outside {k} classes"))),
                TargetSpec::AnyOther if k >= 2 => Ok(sample_other_target(m, k, rng)),
                TargetSpec::AnyOther => Err(Error::Usage("a single-class model has no other class".into())),
            })
            .collect()
    }

    /// Greedy generation: one black-box call on the inputs, one actor pass,
    /// one black-box call on the outputs. Conditions are the widest ones the
    /// constraints allow.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        instances: &[InstanceRecord],
        targets: &[TargetSpec],
        constraints: &ConstraintSet,
        rng: &mut R,
    ) -> Result<Vec<CounterfactualResult>> {
        self.check_inputs(instances, constraints)?;
        let x = self.schema.encode_batch(instances);
        let y_m = self.blackbox.predict_labels(&x)?;
        let y_t = self.resolve_targets(&y_m, targets, rng)?;
        let conditions: Vec<FeatureCondition> = instances
            .iter()
            .map(|r| default_condition(self.schema, r, constraints))
            .collect();
        let rows: Vec<usize> = (0..instances.len()).collect();
        self.run(instances, &x, &y_m, &y_t, &rows, conditions)
    }

    /// `k` counterfactuals per instance, each under an independently sampled
    /// condition within the constraints. Targets are resolved once per
    /// instance and held fixed across samples. Result `i` holds instance
    /// `i`'s samples.
    pub fn generate_diverse<R: Rng + ?Sized>(
        &self,
        instances: &[InstanceRecord],
        targets: &[TargetSpec],
        constraints: &ConstraintSet,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<CounterfactualResult>>> {
        if k == 0 {
            return Err(Error::Usage("diverse generation needs at least one sample".into()));
        }
        self.check_inputs(instances, constraints)?;
        let x = self.schema.encode_batch(instances);
        let y_m = self.blackbox.predict_labels(&x)?;
        let y_t = self.resolve_targets(&y_m, targets, rng)?;
        let mut rows = Vec::with_capacity(instances.len() * k);
        let mut conditions = Vec::with_capacity(instances.len() * k);
        for (i, r) in instances.iter().enumerate() {
            for _ in 0..k {
                rows.push(i);
                conditions.push(sample_condition(self.schema, r, constraints, rng));
            }
        }
        let flat = self.run(instances, &x, &y_m, &y_t, &rows, conditions)?;
        let mut out: Vec<Vec<CounterfactualResult>> = Vec::with_capacity(instances.len());
        let mut it = flat.into_iter();
        for _ in 0..instances.len() {
            out.push(it.by_ref().take(k).collect());
        }
        Ok(out)
    }

    fn check_inputs(&self, instances: &[InstanceRecord], constraints: &ConstraintSet) -> Result<()> {
        if constraints.0.len() != self.schema.features.len() {
            return Err(Error::Config("constraint set does not match the schema".into()));
        }
        instances.iter().try_for_each(|r| self.schema.validate_record(r))
    }

    // `rows[j]` names the instance behind output `j`.
    fn run(
        &self,
        instances: &[InstanceRecord],
        x: &Matrix,
        y_m: &[usize],
        y_t: &[usize],
        rows: &[usize],
        conditions: Vec<FeatureCondition>,
    ) -> Result<Vec<CounterfactualResult>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let k = self.schema.num_classes;
        let z = self.autoencoder.encode(x)?;
        let mut states = Matrix::zeros(rows.len(), self.actor.in_dim());
        for (j, (&i, cond)) in rows.iter().zip(&conditions).enumerate() {
            let c = encode_condition(cond, self.schema);
            write_state(states.row_mut(j), z.row(i), y_m[i], y_t[i], k, &c);
        }
        let mu = self.actor.predict(&states)?;
        let decoded = self.autoencoder.decode(&mu)?;
        let cfs: Vec<InstanceRecord> = rows
            .iter()
            .zip(&conditions)
            .enumerate()
            .map(|(j, (&i, cond))| postprocess(decoded.row(j), &instances[i], cond, self.schema))
            .collect();
        let predicted = self.blackbox.predict_labels(&self.schema.encode_batch(&cfs))?;
        Ok(rows
            .iter()
            .zip(cfs)
            .zip(conditions)
            .zip(predicted)
            .map(|(((&i, cf), condition), p)| CounterfactualResult {
                original: instances[i].clone(),
                counterfactual: cf,
                original_class: y_m[i],
                target: y_t[i],
                predicted: p,
                valid: p == y_t[i],
                condition,
            })
            .collect())
    }
}

/// One row per result: original values, counterfactual values, then the
/// original class, target, predicted class and validity, with class names.
pub fn write_results_csv<W: Write>(results: &[CounterfactualResult], schema: &TabularSchema, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = schema.features.iter().map(|f| f.name.clone()).collect();
    header.extend(schema.features.iter().map(|f| format!("cf_{}", f.name)));
    header.extend(["original_class", "target", "predicted", "valid"].map(String::from));
    w.write_record(&header)?;
    let class = |c: usize| schema.class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
    for r in results {
        let mut row = schema.display_values(&r.original);
        row.extend(schema.display_values(&r.counterfactual));
        row.extend([class(r.original_class), class(r.target), class(r.predicted), r.valid.to_string()]);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("results csv", e))
}

/// One JSON object per line, carrying the condition used.
pub fn write_results_jsonl<W: Write>(results: &[CounterfactualResult], mut out: W) -> Result<()> {
    for r in results {
        let line = serde_json::to_string(r)?;
        writeln!(out, "{line}").map_err(|e| Error::io("results", e))?;
    }
    Ok(())
}

pub fn read_results_jsonl<R: BufRead>(input: R) -> Result<Vec<CounterfactualResult>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("results", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("results line {}: {e}", i + 1)))?;
        out.push(r);
    }
    Ok(out)
}
