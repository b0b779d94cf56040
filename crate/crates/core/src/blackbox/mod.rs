//! Prediction-only classifiers.
//!
//! Everything downstream sees a trained model through [`BlackBox`], which
//! exposes hard labels and nothing else.

mod logistic;
mod tree;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use logistic::{LogisticConfig, LogisticRegression};
pub use tree::{DecisionTree, TreeConfig, TreeNode};

use crate::error::{Error, Result};
use crate::nn::Matrix;

pub trait BlackBox: Send + Sync {
    /// One class index per row of an encoded batch.
    fn predict_labels(&self, batch: &Matrix) -> Result<Vec<usize>>;
}

impl<T: BlackBox + ?Sized> BlackBox for &T {
    fn predict_labels(&self, batch: &Matrix) -> Result<Vec<usize>> {
        (**self).predict_labels(batch)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn check_width(batch: &Matrix, expected: usize) -> Result<()> {
    if batch.cols() != expected && batch.rows() > 0 {
        return Err(Error::Dimension(format!(
            "classifier expects {expected} columns, batch has {}",
            batch.cols()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Logistic,
    Tree,
}

/// Either built-in classifier, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Logistic(LogisticRegression),
    Tree(DecisionTree),
}

impl Classifier {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Classifier::Logistic(_) => ClassifierKind::Logistic,
            Classifier::Tree(_) => ClassifierKind::Tree,
        }
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Matrix> {
        match self {
            Classifier::Logistic(m) => m.to_tensors(),
            Classifier::Tree(t) => t.to_tensors(),
        }
    }

    pub fn from_tensors(kind: ClassifierKind, tensors: &BTreeMap<String, Matrix>) -> Result<Self> {
        Ok(match kind {
            ClassifierKind::Logistic => Classifier::Logistic(LogisticRegression::from_tensors(tensors)?),
            ClassifierKind::Tree => Classifier::Tree(DecisionTree::from_tensors(tensors)?),
        })
    }
}

impl BlackBox for Classifier {
    fn predict_labels(&self, batch: &Matrix) -> Result<Vec<usize>> {
        match self {
            Classifier::Logistic(m) => m.predict_labels(batch),
            Classifier::Tree(t) => t.predict_labels(batch),
        }
    }
}

/// Fraction of predictions equal to `labels`.
pub fn accuracy(model: &dyn BlackBox, batch: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Usage("accuracy of an empty batch".into()));
    }
    let pred = model.predict_labels(batch)?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

pub(crate) fn tensor<'a>(tensors: &'a BTreeMap<String, Matrix>, name: &str) -> Result<&'a Matrix> {
    tensors
        .get(name)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name:?}")))
}

#[cfg(test)]
mod tests;
