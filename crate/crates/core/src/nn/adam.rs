use serde::{Deserialize, Serialize};

use super::{Matrix, NetworkParameters};
use crate::error::{Error, Result};

/// Bias-corrected Adam with per-tensor first and second moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &NetworkParameters, learning_rate: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One update of `params` in place. Nothing is modified if any gradient
    /// tensor is non-finite or mis-shaped.
    pub fn update(&mut self, params: &mut NetworkParameters, grads: &NetworkParameters) -> Result<()> {
        let n = self.first_moment.len();
        if params.tensors().count() != n || grads.tensors().count() != n {
            return Err(Error::Dimension(format!(
                "adam state tracks {n} tensors, got {} parameters and {} gradients",
                params.tensors().count(),
                grads.tensors().count()
            )));
        }
        for (idx, (p, g)) in params.tensors().zip(grads.tensors()).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "tensor {idx}: parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(tensor_label(grads, idx)));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn tensor_label(params: &NetworkParameters, flat_index: usize) -> String {
    let mut seen = 0;
    for (layer, tensors) in params.layers.iter().enumerate() {
        if flat_index < seen + tensors.len() {
            return format!("layer {layer} tensor {}", flat_index - seen);
        }
        seen += tensors.len();
    }
    format!("tensor {flat_index}")
}
