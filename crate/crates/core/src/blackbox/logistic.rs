use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{argmax, check_width, tensor, BlackBox};
use crate::error::{Error, Result};
use crate::nn::{softmax_in_place, AdamState, Matrix, NetworkParameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    /// Inverse regularization strength.
    pub c: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            c: 1.0,
            epochs: 500,
            learning_rate: 1e-2,
        }
    }
}

/// Multinomial logistic regression, one weight column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    weight: Matrix,
    bias: Matrix,
    loss_history: Vec<f64>,
}

impl LogisticRegression {
    /// Minimizes `Σ_i CE_i + ||W||² / (2C)` (bias unpenalized) with full-batch
    /// Adam from zero weights. The objective is divided by the row count
    /// before differentiation, which leaves the minimizer unchanged.
    pub fn train(x: &Matrix, labels: &[usize], num_classes: usize, config: &LogisticConfig) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} rows but {} labels",
                x.rows(),
                labels.len()
            )));
        }
        if !(config.c > 0.0) || config.epochs == 0 || !(config.learning_rate > 0.0) {
            return Err(Error::Config("logistic regression needs C > 0, epochs > 0, lr > 0".into()));
        }
        if labels.iter().any(|&y| y >= num_classes) {
            return Err(Error::Config(format!("label outside {num_classes} classes")));
        }
        let mut present = vec![false; num_classes];
        labels.iter().for_each(|&y| present[y] = true);
        if present.iter().filter(|&&p| p).count() < 2 {
            return Err(Error::Config(
                "logistic regression needs at least two classes in the training data".into(),
            ));
        }

        let n = x.rows() as f64;
        let mut params = NetworkParameters {
            layers: vec![vec![
                Matrix::zeros(x.cols(), num_classes),
                Matrix::zeros(1, num_classes),
            ]],
        };
        let mut adam = AdamState::new(&params, config.learning_rate);
        let mut loss_history = Vec::with_capacity(config.epochs);
        for _ in 0..config.epochs {
            let (w, b) = (&params.layers[0][0], &params.layers[0][1]);
            let mut probs = scores(x, w, b)?;
            for r in 0..probs.rows() {
                softmax_in_place(probs.row_mut(r));
            }
            let mut ce = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                ce -= probs.get(r, y).max(f64::MIN_POSITIVE).ln();
                let v = probs.get(r, y);
                probs.set(r, y, v - 1.0);
            }
            let penalty = w.data().iter().map(|v| v * v).sum::<f64>() / (2.0 * config.c);
            loss_history.push((ce + penalty) / n);

            // probs now holds dCE/dscores.
            let mut grad_w = x.t_matmul(&probs)?;
            grad_w.data_mut().iter_mut().zip(w.data()).for_each(|(g, &wv)| *g += wv / config.c);
            grad_w.scale(1.0 / n);
            let grad_b = Matrix::row_vector(probs.column_sums().into_iter().map(|g| g / n).collect());
            let grads = NetworkParameters {
                layers: vec![vec![grad_w, grad_b]],
            };
            adam.update(&mut params, &grads)?;
        }
        let mut tensors = params.layers.remove(0).into_iter();
        Ok(LogisticRegression {
            weight: tensors.next().expect("weight"),
            bias: tensors.next().expect("bias"),
            loss_history,
        })
    }

    /// Regularized objective per row before each epoch's update.
    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Matrix> {
        BTreeMap::from([
            ("weight".to_string(), self.weight.clone()),
            ("bias".to_string(), self.bias.clone()),
        ])
    }

    pub fn from_tensors(tensors: &BTreeMap<String, Matrix>) -> Result<Self> {
        let weight = tensor(tensors, "weight")?.clone();
        let bias = tensor(tensors, "bias")?.clone();
        if bias.rows() != 1 || bias.cols() != weight.cols() || !weight.is_finite() || !bias.is_finite() {
            return Err(Error::Format("malformed logistic regression tensors".into()));
        }
        Ok(LogisticRegression {
            weight,
            bias,
            loss_history: Vec::new(),
        })
    }
}

fn scores(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut s = x.matmul(w)?;
    for r in 0..s.rows() {
        s.row_mut(r).iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
    }
    Ok(s)
}

impl BlackBox for LogisticRegression {
    fn predict_labels(&self, batch: &Matrix) -> Result<Vec<usize>> {
        check_width(batch, self.weight.rows())?;
        if batch.rows() == 0 {
            return Ok(Vec::new());
        }
        let s = scores(batch, &self.weight, &self.bias)?;
        Ok(s.iter_rows().map(argmax).collect())
    }
}
