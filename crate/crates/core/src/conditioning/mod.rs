//! Target and feature conditioning, and the post-processing map that forces
//! decoded rows to respect a condition.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Bernoulli, Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, FeatureValue, InstanceRecord, TabularSchema};
use crate::error::{Error, Result};

/// One entry of a constraint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Free,
    Immutable,
    IncreaseOnly,
    DecreaseOnly,
    Range([f64; 2]),
    Subset(Vec<String>),
}

/// A constraint resolved against a schema.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureConstraint {
    Free,
    Immutable,
    IncreaseOnly,
    DecreaseOnly,
    Range { lo: f64, hi: f64 },
    Subset { allowed: Vec<bool> },
}

/// Per-feature constraints in schema order. Features absent from a
/// constraint file are free.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet(pub Vec<FeatureConstraint>);

impl ConstraintSet {
    pub fn free(schema: &TabularSchema) -> Self {
        ConstraintSet(vec![FeatureConstraint::Free; schema.features.len()])
    }

    pub fn immutable(schema: &TabularSchema) -> Self {
        ConstraintSet(vec![FeatureConstraint::Immutable; schema.features.len()])
    }

    /// Parses a JSON object mapping feature names to constraints, e.g.
    /// `{"age": "increase_only", "hours": {"range": [10, 60]}}`.
    pub fn from_json(text: &str, schema: &TabularSchema) -> Result<Self> {
        let raw: BTreeMap<String, Constraint> =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("constraint file: {e}")))?;
        Self::resolve(&raw, schema)
    }

    pub fn load(path: impl AsRef<Path>, schema: &TabularSchema) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, schema)
    }

    pub fn resolve(raw: &BTreeMap<String, Constraint>, schema: &TabularSchema) -> Result<Self> {
        let mut out = Self::free(schema);
        for (name, c) in raw {
            let j = schema
                .feature_index(name)
                .ok_or_else(|| Error::Config(format!("constraint on unknown feature {name:?}")))?;
            let kind = &schema.features[j].kind;
            out.0[j] = match (c, kind) {
                (Constraint::Free, _) => FeatureConstraint::Free,
                (Constraint::Immutable, _) => FeatureConstraint::Immutable,
                (Constraint::IncreaseOnly, FeatureKind::Numerical(_)) => FeatureConstraint::IncreaseOnly,
                (Constraint::DecreaseOnly, FeatureKind::Numerical(_)) => FeatureConstraint::DecreaseOnly,
                (Constraint::Range([lo, hi]), FeatureKind::Numerical(_)) => {
                    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                        return Err(Error::Config(format!("feature {name:?}: invalid range [{lo}, {hi}]")));
                    }
                    FeatureConstraint::Range { lo: *lo, hi: *hi }
                }
                (Constraint::Subset(values), FeatureKind::Categorical { categories }) => {
                    let mut allowed = vec![false; categories.len()];
                    for v in values {
                        let k = categories.iter().position(|c| c == v).ok_or_else(|| {
                            Error::Config(format!("feature {name:?}: unknown category {v:?} in subset"))
                        })?;
                        allowed[k] = true;
                    }
                    FeatureConstraint::Subset { allowed }
                }
                (other, _) => {
                    return Err(Error::Config(format!(
                        "constraint {other:?} does not apply to feature {name:?}"
                    )))
                }
            };
        }
        Ok(out)
    }
}

/// Allowed change for one feature of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureRule {
    /// Fractions of the feature range allowed below and above the original.
    Numerical { p_min: f64, p_max: f64 },
    Categorical { mask: Vec<bool> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCondition(pub Vec<FeatureRule>);

// Largest (p_min, p_max) a numerical constraint admits for original value `a`.
fn numerical_caps(c: &FeatureConstraint, a: f64, a_min: f64, a_max: f64) -> (f64, f64) {
    match *c {
        FeatureConstraint::Immutable => (0.0, 0.0),
        FeatureConstraint::IncreaseOnly => (0.0, 1.0),
        FeatureConstraint::DecreaseOnly => (1.0, 0.0),
        FeatureConstraint::Range { lo, hi } => {
            let range = a_max - a_min;
            (((a - lo) / range).clamp(0.0, 1.0), ((hi - a) / range).clamp(0.0, 1.0))
        }
        _ => (1.0, 1.0),
    }
}

fn categorical_allowed(c: &FeatureConstraint, k: usize, size: usize) -> Vec<bool> {
    let mut allowed = match c {
        FeatureConstraint::Immutable => vec![false; size],
        FeatureConstraint::Subset { allowed } => allowed.clone(),
        _ => vec![true; size],
    };
    allowed[k] = true;
    allowed
}

/// Training-time condition: numerical fractions are `cap · Beta(2, 2)`, mask
/// bits inside the allowed set are `Bern(0.5)`; the original category is
/// always permitted.
pub fn sample_condition<R: Rng + ?Sized>(
    schema: &TabularSchema,
    record: &InstanceRecord,
    constraints: &ConstraintSet,
    rng: &mut R,
) -> FeatureCondition {
    let beta = Beta::new(2.0, 2.0).expect("valid beta parameters");
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let rules = schema
        .features
        .iter()
        .zip(&record.0)
        .zip(&constraints.0)
        .map(|((f, v), c)| match (&f.kind, v) {
            (FeatureKind::Numerical(s), FeatureValue::Numerical(a)) => {
                let (cap_min, cap_max) = numerical_caps(c, *a, s.a_min, s.a_max);
                let p_min = if cap_min > 0.0 { cap_min * beta.sample(rng) } else { 0.0 };
                let p_max = if cap_max > 0.0 { cap_max * beta.sample(rng) } else { 0.0 };
                FeatureRule::Numerical { p_min, p_max }
            }
            (FeatureKind::Categorical { categories }, FeatureValue::Categorical(k)) => {
                let allowed = categorical_allowed(c, *k, categories.len());
                let mask = allowed
                    .iter()
                    .enumerate()
                    .map(|(i, &ok)| i == *k || (ok && coin.sample(rng)))
                    .collect();
                FeatureRule::Categorical { mask }
            }
            _ => panic!("record does not match schema"),
        })
        .collect();
    FeatureCondition(rules)
}

/// Widest condition the constraints allow: free numericals get
/// `p_min = p_max = 1`, free categoricals a full mask.
pub fn default_condition(schema: &TabularSchema, record: &InstanceRecord, constraints: &ConstraintSet) -> FeatureCondition {
    let rules = schema
        .features
        .iter()
        .zip(&record.0)
        .zip(&constraints.0)
        .map(|((f, v), c)| match (&f.kind, v) {
            (FeatureKind::Numerical(s), FeatureValue::Numerical(a)) => {
                let (p_min, p_max) = numerical_caps(c, *a, s.a_min, s.a_max);
                FeatureRule::Numerical { p_min, p_max }
            }
            (FeatureKind::Categorical { categories }, FeatureValue::Categorical(k)) => FeatureRule::Categorical {
                mask: categorical_allowed(c, *k, categories.len()),
            },
            _ => panic!("record does not match schema"),
        })
        .collect();
    FeatureCondition(rules)
}

/// Flat vector: `(-p_min, p_max)` for each numerical feature, then each
/// categorical mask, both groups in schema order.
pub fn encode_condition(cond: &FeatureCondition, schema: &TabularSchema) -> Vec<f64> {
    let mut out = vec![0.0; schema.condition_dim()];
    encode_condition_into(cond, schema, &mut out);
    out
}

pub fn encode_condition_into(cond: &FeatureCondition, schema: &TabularSchema, out: &mut [f64]) {
    let mut num = 0;
    let mut offset = 2 * schema.num_numerical();
    for rule in &cond.0 {
        match rule {
            FeatureRule::Numerical { p_min, p_max } => {
                // `0.0 - x` rather than `-x` keeps a zero fraction as +0.0.
                out[num] = 0.0 - p_min;
                out[num + 1] = *p_max;
                num += 2;
            }
            FeatureRule::Categorical { mask } => {
                for (o, &m) in out[offset..offset + mask.len()].iter_mut().zip(mask) {
                    *o = if m { 1.0 } else { 0.0 };
                }
                offset += mask.len();
            }
        }
    }
}

/// Inverse of [`encode_condition`].
pub fn decode_condition(c: &[f64], schema: &TabularSchema) -> Result<FeatureCondition> {
    if c.len() != schema.condition_dim() {
        return Err(Error::Dimension(format!(
            "condition vector of width {} for schema width {}",
            c.len(),
            schema.condition_dim()
        )));
    }
    let mut num = 0;
    let mut offset = 2 * schema.num_numerical();
    let rules = schema
        .features
        .iter()
        .map(|f| match &f.kind {
            FeatureKind::Numerical(_) => {
                let r = FeatureRule::Numerical {
                    p_min: 0.0 - c[num],
                    p_max: c[num + 1],
                };
                num += 2;
                r
            }
            FeatureKind::Categorical { categories } => {
                let mask = c[offset..offset + categories.len()].iter().map(|&v| v > 0.5).collect();
                offset += categories.len();
                FeatureRule::Categorical { mask }
            }
        })
        .collect();
    Ok(FeatureCondition(rules))
}

/// `[a - p_min·(a_max - a_min), a + p_max·(a_max - a_min)]`
pub fn interval(a: f64, a_min: f64, a_max: f64, p_min: f64, p_max: f64) -> (f64, f64) {
    let range = a_max - a_min;
    (a - p_min * range, a + p_max * range)
}

/// Uniform over all classes, the original prediction included.
pub fn sample_target<R: Rng + ?Sized>(num_classes: usize, rng: &mut R) -> usize {
    rng.random_range(0..num_classes)
}

/// Uniform over the classes other than `y_m`.
pub fn sample_other_target<R: Rng + ?Sized>(y_m: usize, num_classes: usize, rng: &mut R) -> usize {
    assert!(num_classes >= 2, "need two classes to pick a different one");
    let t = rng.random_range(0..num_classes - 1);
    if t >= y_m {
        t + 1
    } else {
        t
    }
}

pub fn one_hot(class: usize, num_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_classes];
    v[class] = 1.0;
    v
}

/// Maps one decoded row (numerical means in standardized units, category
/// probabilities) to a record satisfying `cond`: numericals are clipped to
/// their interval and integers rounded inside it; each categorical takes the
/// most probable allowed category, ties to the lowest index.
pub fn postprocess(
    decoded: &[f64],
    original: &InstanceRecord,
    cond: &FeatureCondition,
    schema: &TabularSchema,
) -> InstanceRecord {
    let mut num = 0;
    let mut offset = schema.num_numerical();
    let values = schema
        .features
        .iter()
        .zip(&original.0)
        .zip(&cond.0)
        .map(|((f, v), rule)| match (&f.kind, v, rule) {
            (FeatureKind::Numerical(s), FeatureValue::Numerical(a), FeatureRule::Numerical { p_min, p_max }) => {
                let (lo, hi) = interval(*a, s.a_min, s.a_max, *p_min, *p_max);
                let mut x = s.unstandardize(decoded[num]).clamp(lo, hi);
                if !x.is_finite() {
                    x = *a;
                }
                if s.integer {
                    let (ilo, ihi) = (lo.ceil(), hi.floor());
                    x = if ilo <= ihi { x.round().clamp(ilo, ihi) } else { *a };
                }
                num += 1;
                FeatureValue::Numerical(x)
            }
            (FeatureKind::Categorical { categories }, _, FeatureRule::Categorical { mask }) => {
                let block = &decoded[offset..offset + categories.len()];
                offset += categories.len();
                let mut best: Option<usize> = None;
                for (i, (&p, &ok)) in block.iter().zip(mask).enumerate() {
                    if ok && best.is_none_or(|b| p > block[b]) {
                        best = Some(i);
                    }
                }
                FeatureValue::Categorical(best.or_else(|| v.as_category()).expect("mask permits the original"))
            }
            _ => panic!("record, condition and schema disagree"),
        })
        .collect();
    InstanceRecord(values)
}

/// Whether `cf` lies inside every interval and mask of `cond` taken around
/// `original`.
pub fn satisfies(schema: &TabularSchema, original: &InstanceRecord, cf: &InstanceRecord, cond: &FeatureCondition) -> bool {
    schema
        .features
        .iter()
        .zip(original.0.iter().zip(&cf.0))
        .zip(&cond.0)
        .all(|((f, (o, x)), rule)| match (&f.kind, o, x, rule) {
            (
                FeatureKind::Numerical(s),
                FeatureValue::Numerical(a),
                FeatureValue::Numerical(v),
                FeatureRule::Numerical { p_min, p_max },
            ) => {
                let (lo, hi) = interval(*a, s.a_min, s.a_max, *p_min, *p_max);
                lo <= *v && *v <= hi && (!s.integer || v.fract() == 0.0)
            }
            (_, FeatureValue::Categorical(_), FeatureValue::Categorical(k), FeatureRule::Categorical { mask }) => {
                mask.get(*k).copied().unwrap_or(false)
            }
            _ => false,
        })
}

/// Whether `cf` could come from some condition the constraints allow.
pub fn satisfies_constraints(
    schema: &TabularSchema,
    original: &InstanceRecord,
    cf: &InstanceRecord,
    constraints: &ConstraintSet,
) -> bool {
    satisfies(schema, original, cf, &default_condition(schema, original, constraints))
}
