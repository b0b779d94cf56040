//! Autoencoder over the encoded tabular layout.
//!
//! The encoder maps an encoded row into `(-1, 1)^latent_dim`. The decoder
//! emits one value per encoded column: numerical means (unit-variance
//! Gaussian heads, so the likelihood reduces to squared error) and one logit
//! per category, normalized by a softmax per categorical feature.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TabularSchema;
use crate::error::{Error, Result};
use crate::nn::{softmax_groups, AdamState, LayerSpec, Matrix, Network, NetworkParameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub latent_dim: usize,
    /// `None` gives a single linear map each way.
    pub hidden_dim: Option<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            latent_dim: 15,
            hidden_dim: Some(128),
            steps: 20_000,
            batch_size: 128,
            learning_rate: 1e-3,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 {
            return Err(Error::Config("autoencoder latent_dim must be at least 1".into()));
        }
        if self.hidden_dim == Some(0) || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("autoencoder hidden_dim, batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Where the heads sit in a decoded row: numerical means first, then one
/// `[start, end)` logit group per categorical feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub num_numerical: usize,
    pub groups: Vec<(usize, usize)>,
}

impl HeadLayout {
    pub fn from_schema(schema: &TabularSchema) -> Self {
        HeadLayout {
            num_numerical: schema.num_numerical(),
            groups: schema.categorical_blocks().into_iter().map(|r| (r.start, r.end)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.groups.last().map_or(self.num_numerical, |g| g.1)
    }
}

/// Mean over numericals of squared error plus mean over categoricals of
/// cross-entropy, averaged over rows, with its gradient with respect to the
/// raw decoder output (means and logits).
pub fn reconstruction_loss(layout: &HeadLayout, raw: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if raw.shape() != target.shape() || raw.cols() != layout.width() {
        return Err(Error::Dimension(format!(
            "reconstruction of {:?} against {:?} with {} heads",
            raw.shape(),
            target.shape(),
            layout.width()
        )));
    }
    let rows = raw.rows().max(1) as f64;
    let mut probs = raw.clone();
    softmax_groups(&mut probs, &layout.groups);
    let mut grad = Matrix::zeros(raw.rows(), raw.cols());
    let mut loss = 0.0;
    let n_num = layout.num_numerical;
    let n_cat = layout.groups.len();
    for r in 0..raw.rows() {
        let (p, t, g) = (probs.row(r), target.row(r), grad.row_mut(r));
        if n_num > 0 {
            let scale = 1.0 / (n_num as f64 * rows);
            for j in 0..n_num {
                let d = p[j] - t[j];
                loss += d * d * scale;
                g[j] = 2.0 * d * scale;
            }
        }
        if n_cat > 0 {
            let scale = 1.0 / (n_cat as f64 * rows);
            for &(s, e) in &layout.groups {
                for j in s..e {
                    if t[j] > 0.0 {
                        loss -= t[j] * p[j].max(f64::MIN_POSITIVE).ln() * scale;
                    }
                    g[j] = (p[j] - t[j]) * scale;
                }
            }
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularAutoencoder {
    encoder: Network,
    decoder: Network,
    layout: HeadLayout,
    config: AutoencoderConfig,
}

/// Parameter gradients for both halves.
#[derive(Debug, Clone)]
pub struct AutoencoderGradients {
    pub encoder: NetworkParameters,
    pub decoder: NetworkParameters,
}

impl TabularAutoencoder {
    fn specs(layout: &HeadLayout, config: &AutoencoderConfig) -> (Vec<LayerSpec>, Vec<LayerSpec>) {
        let (d, l) = (layout.width(), config.latent_dim);
        match config.hidden_dim {
            Some(h) => (
                vec![
                    LayerSpec::Dense { in_dim: d, out_dim: h },
                    LayerSpec::Relu { dim: h },
                    LayerSpec::Dense { in_dim: h, out_dim: l },
                    LayerSpec::Tanh { dim: l },
                ],
                vec![
                    LayerSpec::Dense { in_dim: l, out_dim: h },
                    LayerSpec::Relu { dim: h },
                    LayerSpec::Dense { in_dim: h, out_dim: d },
                ],
            ),
            None => (
                vec![LayerSpec::Dense { in_dim: d, out_dim: l }, LayerSpec::Tanh { dim: l }],
                vec![LayerSpec::Dense { in_dim: l, out_dim: d }],
            ),
        }
    }

    /// Untrained autoencoder with seeded initialization.
    pub fn new(layout: HeadLayout, config: AutoencoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if layout.width() == 0 {
            return Err(Error::Config("autoencoder over zero encoded columns".into()));
        }
        let (enc, dec) = Self::specs(&layout, &config);
        Ok(TabularAutoencoder {
            encoder: Network::new(enc, rng)?,
            decoder: Network::new(dec, rng)?,
            layout,
            config,
        })
    }

    /// Trains on rows of `data` drawn uniformly with replacement. Returns the
    /// model and the per-step batch loss.
    pub fn train(data: &Matrix, layout: HeadLayout, config: AutoencoderConfig, seed: u64) -> Result<(Self, Vec<f64>)> {
        if data.rows() == 0 {
            return Err(Error::Config("autoencoder training set is empty".into()));
        }
        if data.cols() != layout.width() {
            return Err(Error::Dimension(format!(
                "training data has {} columns, layout {}",
                data.cols(),
                layout.width()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ae = TabularAutoencoder::new(layout, config, &mut rng)?;
        let mut enc_opt = AdamState::new(ae.encoder.params(), ae.config.learning_rate);
        let mut dec_opt = AdamState::new(ae.decoder.params(), ae.config.learning_rate);
        let mut history = Vec::with_capacity(ae.config.steps);
        let mut idx = vec![0usize; ae.config.batch_size];
        for _ in 0..ae.config.steps {
            idx.iter_mut().for_each(|i| *i = rng.random_range(0..data.rows()));
            let batch = data.select_rows(&idx);
            let (loss, grads) = ae.loss_and_gradients(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("autoencoder loss became {loss}")));
            }
            history.push(loss);
            ae.encoder.adam_step(&grads.encoder, &mut enc_opt)?;
            ae.decoder.adam_step(&grads.decoder, &mut dec_opt)?;
        }
        Ok((ae, history))
    }

    pub fn loss_and_gradients(&self, batch: &Matrix) -> Result<(f64, AutoencoderGradients)> {
        let enc = self.encoder.forward(batch)?;
        let dec = self.decoder.forward(enc.output())?;
        let (loss, g_out) = reconstruction_loss(&self.layout, dec.output(), batch)?;
        let dg = self.decoder.backward(&dec, &g_out)?;
        let eg = self.encoder.backward_params(&enc, &dg.input)?;
        Ok((
            loss,
            AutoencoderGradients {
                encoder: eg,
                decoder: dg.params,
            },
        ))
    }

    pub fn loss(&self, batch: &Matrix) -> Result<f64> {
        let raw = self.decoder.predict(&self.encoder.predict(batch)?)?;
        Ok(reconstruction_loss(&self.layout, &raw, batch)?.0)
    }

    pub fn encode(&self, batch: &Matrix) -> Result<Matrix> {
        self.encoder.predict(batch)
    }

    /// Numerical means and per-feature category probabilities, laid out like
    /// an encoded row.
    pub fn decode(&self, latent: &Matrix) -> Result<Matrix> {
        let mut out = self.decode_raw(latent)?;
        softmax_groups(&mut out, &self.layout.groups);
        Ok(out)
    }

    /// Decoder output before the softmax.
    pub fn decode_raw(&self, latent: &Matrix) -> Result<Matrix> {
        self.decoder.predict(latent)
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.layout.width()
    }

    pub fn layout(&self) -> &HeadLayout {
        &self.layout
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn decoder(&self) -> &Network {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut Network {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut Network {
        &mut self.decoder
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Matrix> {
        let mut out = BTreeMap::new();
        for (prefix, net) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (name, t) in net.named_tensors() {
                out.insert(format!("{prefix}.{name}"), t.clone());
            }
        }
        out
    }

    pub fn from_tensors(layout: HeadLayout, config: AutoencoderConfig, tensors: &BTreeMap<String, Matrix>) -> Result<Self> {
        config.validate()?;
        let (enc, dec) = Self::specs(&layout, &config);
        let encoder = Network::from_named_tensors(enc, |n| tensors.get(&format!("encoder.{n}")).cloned())?;
        let decoder = Network::from_named_tensors(dec, |n| tensors.get(&format!("decoder.{n}")).cloned())?;
        Ok(TabularAutoencoder {
            encoder,
            decoder,
            layout,
            config,
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn layout() -> HeadLayout {
        // Two numericals, categoricals of width 3 and 2.
        HeadLayout {
            num_numerical: 2,
            groups: vec![(2, 5), (5, 7)],
        }
    }

    fn row(a: f64, b: f64, k: usize, j: usize) -> Vec<f64> {
        let mut v = vec![a, b, 0.0, 0.0, 0.0, 0.0, 0.0];
        v[2 + k] = 1.0;
        v[5 + j] = 1.0;
        v
    }

    fn tiny_config(hidden: Option<usize>) -> AutoencoderConfig {
        AutoencoderConfig {
            latent_dim: 3,
            hidden_dim: hidden,
            steps: 0,
            batch_size: 4,
            learning_rate: 1e-3,
        }
    }

    #[test]
    fn loss_by_hand() {
        // One row: means off by 1 and 0; uniform logits over 3 and 2 classes.
        let l = layout();
        let raw = Matrix::from_rows(&[vec![1.5, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        let target = Matrix::from_rows(&[row(0.5, -0.5, 1, 0)]).unwrap();
        let (loss, grad) = reconstruction_loss(&l, &raw, &target).unwrap();
        let expected = (1.0 + 0.0) / 2.0 + (3f64.ln() + 2f64.ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
        assert!((grad.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((grad.get(0, 3) - (1.0 / 3.0 - 1.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for hidden in [Some(5), None] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let ae = TabularAutoencoder::new(layout(), tiny_config(hidden), &mut rng).unwrap();
            let batch = Matrix::from_rows(&[row(0.3, -1.2, 2, 1), row(-0.7, 0.4, 0, 0), row(1.1, 0.0, 1, 1)]).unwrap();
            let (_, grads) = ae.loss_and_gradients(&batch).unwrap();
            let h = 1e-5;
            for (which, analytic) in [(0, &grads.encoder), (1, &grads.decoder)] {
                for (ti, t) in analytic.tensors().enumerate() {
                    for k in 0..t.data().len() {
                        let eval = |delta: f64| {
                            let mut probe = ae.clone();
                            let net = if which == 0 { probe.encoder_mut() } else { probe.decoder_mut() };
                            net.params_mut().tensors_mut().nth(ti).unwrap().data_mut()[k] += delta;
                            probe.loss(&batch).unwrap()
                        };
                        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                        let a = t.data()[k];
                        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
                        assert!(rel < 1e-4, "net {which} tensor {ti}[{k}]: {a} vs {numeric}");
                    }
                }
            }
        }
    }

    #[test]
    fn memorizes_a_single_record() {
        let r = row(0.8, -1.3, 2, 1);
        let data = Matrix::from_rows(&[r.clone(), r.clone()]).unwrap();
        let cfg = AutoencoderConfig {
            latent_dim: 3,
            hidden_dim: Some(16),
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
        };
        let (ae, history) = TabularAutoencoder::train(&data, layout(), cfg, 5).unwrap();
        let final_loss = ae.loss(&data).unwrap();
        assert!(final_loss < 1e-2, "{final_loss}");
        assert!(final_loss < history[0]);
        let decoded = ae.decode(&ae.encode(&data).unwrap()).unwrap();
        let d = decoded.row(0);
        let argmax = |s: &[f64]| (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        assert_eq!(argmax(&d[2..5]), 2);
        assert_eq!(argmax(&d[5..7]), 1);
    }

    #[test]
    fn smoothed_loss_decreases_on_synthetic_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let k = rng.random_range(0..3);
                row(k as f64 - 1.0 + rng.random_range(-0.2..0.2), rng.random_range(-1.0..1.0), k, k % 2)
            })
            .collect();
        let data = Matrix::from_rows(&rows).unwrap();
        let cfg = AutoencoderConfig {
            latent_dim: 4,
            hidden_dim: Some(16),
            steps: 1000,
            batch_size: 32,
            learning_rate: 1e-3,
        };
        let (_, h) = TabularAutoencoder::train(&data, layout(), cfg, 2).unwrap();
        let head: f64 = h[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = h[950..].iter().sum::<f64>() / 50.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = Matrix::from_rows(&[row(0.1, 0.2, 0, 1), row(-0.4, 0.9, 2, 0)]).unwrap();
        let cfg = AutoencoderConfig { steps: 20, ..tiny_config(Some(6)) };
        let (a, _) = TabularAutoencoder::train(&data, layout(), cfg.clone(), 9).unwrap();
        let (b, _) = TabularAutoencoder::train(&data, layout(), cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn errors_and_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = AutoencoderConfig { latent_dim: 0, ..tiny_config(None) };
        assert!(matches!(TabularAutoencoder::new(layout(), bad, &mut rng), Err(Error::Config(_))));
        let ae = TabularAutoencoder::new(layout(), tiny_config(Some(4)), &mut rng).unwrap();
        assert_eq!(ae.encode(&Matrix::zeros(0, 7)).unwrap().shape(), (0, 3));
        assert!(ae.encode(&Matrix::zeros(1, 6)).is_err());
        assert!(ae.decode(&Matrix::zeros(1, 4)).is_err());
        let z = Matrix::zeros(1, 3);
        assert_eq!(ae.decode(&z).unwrap(), ae.decode(&z).unwrap());
        let two = Matrix::from_rows(&[row(1.0, 2.0, 0, 0), row(1.0, 2.0, 0, 0)]).unwrap();
        let e = ae.encode(&two).unwrap();
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn tensors_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ae = TabularAutoencoder::new(layout(), tiny_config(Some(4)), &mut rng).unwrap();
        let back = TabularAutoencoder::from_tensors(layout(), tiny_config(Some(4)), &ae.to_tensors()).unwrap();
        assert_eq!(back, ae);
        assert!(TabularAutoencoder::from_tensors(layout(), tiny_config(None), &ae.to_tensors()).is_err());
    }

    proptest! {
        #[test]
        fn heads_are_distributions_and_latents_bounded(
            values in proptest::collection::vec(-50.0f64..50.0, 7 * 3),
            seed in 0u64..100,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ae = TabularAutoencoder::new(layout(), tiny_config(Some(5)), &mut rng).unwrap();
            let x = Matrix::from_vec(3, 7, values).unwrap();
            let z = ae.encode(&x).unwrap();
            prop_assert!(z.data().iter().all(|v| v.abs() < 1.0));
            let d = ae.decode(&z.map(|v| v * 0.9)).unwrap();
            for r in d.iter_rows() {
                prop_assert!(r[..2].iter().all(|v| v.is_finite()));
                for &(s, e) in &layout().groups {
                    prop_assert!(r[s..e].iter().all(|&p| p > 0.0));
                    prop_assert!((r[s..e].iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
