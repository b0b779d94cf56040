//! One-step-horizon actor-critic training of the counterfactual policy.
//!
//! The actor maps `state = [z, onehot(y_M), onehot(y_T), c]` to a latent
//! counterfactual embedding. The critic regresses the binary reward of a
//! state-action pair directly; there is no bootstrapped target.

mod buffer;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use buffer::{Experience, ReplayBuffer};

use crate::autoencoder::{HeadLayout, TabularAutoencoder};
use crate::blackbox::BlackBox;
use crate::conditioning::{
    decode_condition, encode_condition, postprocess, sample_condition, sample_target, ConstraintSet,
    FeatureCondition,
};
use crate::data::{BalancedSampler, InstanceRecord, TabularSchema};
use crate::error::{Error, Result};
use crate::nn::{AdamState, LayerSpec, Matrix, Network, NetworkParameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSampling {
    /// Uniform over all classes, the current prediction included.
    #[default]
    Uniform,
    /// Always the current prediction.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Steps with uniformly random actions before the actor acts.
    pub exploration_steps: usize,
    pub noise_std: f64,
    /// Steps collected before the first gradient update.
    pub warmup_steps: usize,
    pub updates_per_step: usize,
    pub hidden_dim: usize,
    pub buffer_capacity: usize,
    pub target_sampling: TargetSampling,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_s: 0.5,
            lambda_c: 0.5,
            steps: 15_000,
            batch_size: 128,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            exploration_steps: 100,
            noise_std: 0.1,
            warmup_steps: 10,
            updates_per_step: 1,
            hidden_dim: 256,
            buffer_capacity: 128_000,
            target_sampling: TargetSampling::Uniform,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.batch_size > 0
            && self.hidden_dim > 0
            && self.buffer_capacity > 0
            && self.actor_lr > 0.0
            && self.critic_lr > 0.0;
        if !positive {
            return Err(Error::Config("batch size, hidden dim, buffer capacity and learning rates must be positive".into()));
        }
        if !(self.lambda_s >= 0.0 && self.lambda_c >= 0.0 && self.noise_std >= 0.0) {
            return Err(Error::Config("loss weights and noise std must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_c: f64,
}

pub fn state_dim(latent_dim: usize, num_classes: usize, condition_dim: usize) -> usize {
    latent_dim + 2 * num_classes + condition_dim
}

pub fn actor_specs(state_dim: usize, hidden: usize, latent_dim: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense { in_dim: state_dim, out_dim: hidden },
        LayerSpec::LayerNorm { dim: hidden },
        LayerSpec::Relu { dim: hidden },
        LayerSpec::Dense { in_dim: hidden, out_dim: hidden },
        LayerSpec::LayerNorm { dim: hidden },
        LayerSpec::Relu { dim: hidden },
        LayerSpec::Dense { in_dim: hidden, out_dim: latent_dim },
        LayerSpec::Tanh { dim: latent_dim },
    ]
}

/// Input is `[state, action]`; the output is an unbounded scalar.
pub fn critic_specs(state_dim: usize, hidden: usize, latent_dim: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense { in_dim: state_dim + latent_dim, out_dim: hidden },
        LayerSpec::LayerNorm { dim: hidden },
        LayerSpec::Relu { dim: hidden },
        LayerSpec::Dense { in_dim: hidden, out_dim: hidden },
        LayerSpec::LayerNorm { dim: hidden },
        LayerSpec::Relu { dim: hidden },
        LayerSpec::Dense { in_dim: hidden, out_dim: 1 },
    ]
}

/// Writes `[z, onehot(y_m), onehot(y_t), c]` into `out`.
pub fn write_state(out: &mut [f64], z: &[f64], y_m: usize, y_t: usize, num_classes: usize, c: &[f64]) {
    let l = z.len();
    out[..l].copy_from_slice(z);
    out[l..l + 2 * num_classes].fill(0.0);
    out[l + y_m] = 1.0;
    out[l + num_classes + y_t] = 1.0;
    out[l + 2 * num_classes..].copy_from_slice(c);
}

/// 1 when the black box assigns the counterfactual to the target class.
pub fn reward(prediction: usize, target: usize) -> f64 {
    if prediction == target {
        1.0
    } else {
        0.0
    }
}

/// Exploration policy: uniform in `[-1, 1]` before `exploration_steps`,
/// afterwards the actor output plus `N(0, noise_std)` noise, clipped.
pub fn select_action<R: Rng + ?Sized>(
    actor: &Network,
    states: &Matrix,
    step: usize,
    exploration_steps: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<Matrix> {
    if step < exploration_steps {
        let n = states.rows() * actor.out_dim();
        let data = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        return Matrix::from_vec(states.rows(), actor.out_dim(), data);
    }
    let mut a = actor.predict(states)?;
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?;
        a.data_mut()
            .iter_mut()
            .for_each(|v| *v = (*v + noise.sample(rng)).clamp(-1.0, 1.0));
    }
    Ok(a)
}

/// Mean squared error between `Q(state, action)` and the stored rewards,
/// with the critic's parameter gradients.
pub fn critic_loss(
    critic: &Network,
    states: &Matrix,
    actions: &Matrix,
    rewards: &[f64],
) -> Result<(f64, NetworkParameters)> {
    if rewards.is_empty() {
        return Err(Error::Usage("critic loss of an empty batch".into()));
    }
    let input = Matrix::hcat(&[states, actions])?;
    let cache = critic.forward(&input)?;
    let q = cache.output();
    let n = rewards.len() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(q.rows(), 1);
    for (r, &target) in rewards.iter().enumerate() {
        let d = q.get(r, 0) - target;
        loss += d * d / n;
        grad.set(r, 0, 2.0 * d / n);
    }
    Ok((loss, critic.backward_params(&cache, &grad)?))
}

/// Inputs of one actor update.
#[derive(Debug, Clone)]
pub struct ActorBatch {
    pub states: Matrix,
    /// Encoded originals: standardized numericals and one-hot categoricals.
    pub x_encoded: Matrix,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ActorLoss {
    pub total: f64,
    pub l_max: f64,
    pub l_sparsity: f64,
    pub l_consist: f64,
}

/// `L_max + λ_s L_sparsity + λ_c L_consist` and its gradient with respect to
/// the actor parameters. The critic and autoencoder are read-only.
///
/// * `L_max = -mean Q(state, μ(state))`
/// * `L_sparsity` is, per row, the mean absolute difference of decoded and
///   original standardized numericals plus the mean over categorical features
///   of `1 - p(original category)`, averaged over rows.
/// * `L_consist` is the mean squared difference between `μ(state)` and
///   `t = targets(μ)` over rows and latent components; `t` is a constant.
pub fn actor_loss(
    actor: &Network,
    critic: &Network,
    ae: &TabularAutoencoder,
    batch: &ActorBatch,
    weights: LossWeights,
    targets: impl FnOnce(&Matrix) -> Result<Matrix>,
) -> Result<(ActorLoss, NetworkParameters)> {
    let b = batch.states.rows();
    if b == 0 {
        return Err(Error::Usage("actor loss of an empty batch".into()));
    }
    let bf = b as f64;
    let a_cache = actor.forward(&batch.states)?;
    let mu = a_cache.output();
    let l = mu.cols();

    // Critic term.
    let q_cache = critic.forward(&Matrix::hcat(&[&batch.states, mu])?)?;
    let l_max = -q_cache.output().data().iter().sum::<f64>() / bf;
    let s_dim = batch.states.cols();
    let mut grad_mu =
        critic.backward_input_columns(&q_cache, &Matrix::filled(b, 1, -1.0 / bf), s_dim..s_dim + l)?;

    // Sparsity term through the decoder.
    let layout: &HeadLayout = ae.layout();
    let d_cache = ae.decoder().forward(mu)?;
    let raw = d_cache.output();
    let mut probs = raw.clone();
    crate::nn::softmax_groups(&mut probs, &layout.groups);
    let n_num = layout.num_numerical;
    let n_cat = layout.groups.len();
    let mut l_sparsity = 0.0;
    let mut grad_raw = Matrix::zeros(b, raw.cols());
    for r in 0..b {
        let (p, x, g) = (probs.row(r), batch.x_encoded.row(r), grad_raw.row_mut(r));
        if n_num > 0 {
            let scale = 1.0 / (n_num as f64 * bf);
            for j in 0..n_num {
                let d = p[j] - x[j];
                l_sparsity += d.abs() * scale;
                g[j] = weights.lambda_s * scale * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
            }
        }
        if n_cat > 0 {
            let scale = 1.0 / (n_cat as f64 * bf);
            for &(s, e) in &layout.groups {
                let p_orig: f64 = (s..e).map(|j| p[j] * x[j]).sum();
                l_sparsity += (1.0 - p_orig) * scale;
                for j in s..e {
                    g[j] = -weights.lambda_s * scale * p[j] * (x[j] - p_orig);
                }
            }
        }
    }
    if weights.lambda_s != 0.0 {
        grad_mu.add_assign(&ae.decoder().backward_input(&d_cache, &grad_raw)?)?;
    }

    // Consistency term with a constant target.
    let t = targets(mu)?;
    if t.shape() != mu.shape() {
        return Err(Error::Dimension(format!(
            "consistency targets {:?} for actions {:?}",
            t.shape(),
            mu.shape()
        )));
    }
    let mut l_consist = 0.0;
    let scale = 1.0 / (bf * l as f64);
    for ((g, &m), &tv) in grad_mu.data_mut().iter_mut().zip(mu.data()).zip(t.data()) {
        let d = m - tv;
        l_consist += d * d * scale;
        *g += 2.0 * weights.lambda_c * d * scale;
    }

    let grads = actor.backward_params(&a_cache, &grad_mu)?;
    let total = l_max + weights.lambda_s * l_sparsity + weights.lambda_c * l_consist;
    Ok((
        ActorLoss {
            total,
            l_max,
            l_sparsity,
            l_consist,
        },
        grads,
    ))
}

/// `enc(pp(dec(μ), c))` row by row.
pub fn consistency_targets(
    mu: &Matrix,
    ae: &TabularAutoencoder,
    schema: &TabularSchema,
    originals: &[&InstanceRecord],
    conditions: &[FeatureCondition],
) -> Result<Matrix> {
    let decoded = ae.decode(mu)?;
    let mut pp = Matrix::zeros(mu.rows(), schema.encoded_dim());
    for r in 0..mu.rows() {
        let cf = postprocess(decoded.row(r), originals[r], &conditions[r], schema);
        schema.encode_into(&cf, pp.row_mut(r));
    }
    ae.encode(&pp)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Mean reward of the experiences collected this step.
    pub reward_rate: f64,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<ActorLoss>,
}

#[derive(Debug, Clone)]
pub struct TrainedAgent {
    pub actor: Network,
    pub critic: Network,
    pub log: Vec<StepLog>,
}

impl TrainedAgent {
    /// Mean collected reward over the uniform-action phase.
    pub fn random_baseline(&self, exploration_steps: usize) -> Option<f64> {
        mean(self.log.iter().take(exploration_steps).map(|l| l.reward_rate))
    }

    /// Mean collected reward over the last `window` steps.
    pub fn final_reward_rate(&self, window: usize) -> Option<f64> {
        let skip = self.log.len().saturating_sub(window);
        mean(self.log.iter().skip(skip).map(|l| l.reward_rate))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Everything the training loop reads.
pub struct TrainInputs<'a> {
    pub schema: &'a TabularSchema,
    /// Training rows; episodes start from these.
    pub records: &'a [InstanceRecord],
    pub blackbox: &'a dyn BlackBox,
    pub autoencoder: &'a TabularAutoencoder,
    pub constraints: &'a ConstraintSet,
}

/// Runs the full loop. Each step collects `batch_size` one-step episodes
/// from class-balanced starting rows, then (after warmup) performs
/// `updates_per_step` critic and actor updates on uniform buffer batches.
pub fn train(config: &TrainConfig, inputs: &TrainInputs<'_>, mut log_sink: Option<&mut dyn Write>) -> Result<TrainedAgent> {
    config.validate()?;
    let TrainInputs {
        schema,
        records,
        blackbox,
        autoencoder: ae,
        constraints,
    } = *inputs;
    if ae.layout() != &HeadLayout::from_schema(schema) {
        return Err(Error::Config("autoencoder was trained on a different schema".into()));
    }
    if constraints.0.len() != schema.features.len() {
        return Err(Error::Config("constraint set does not match the schema".into()));
    }
    if records.is_empty() {
        return Err(Error::Config("no training records".into()));
    }
    let k = schema.num_classes;
    let latent = ae.latent_dim();
    let s_dim = state_dim(latent, k, schema.condition_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut actor = Network::new(actor_specs(s_dim, config.hidden_dim, latent), &mut rng)?;
    let mut critic = Network::new(critic_specs(s_dim, config.hidden_dim, latent), &mut rng)?;
    let mut actor_opt = AdamState::new(actor.params(), config.actor_lr);
    let mut critic_opt = AdamState::new(critic.params(), config.critic_lr);

    // The black box is deterministic, so its labels for the starting rows are
    // computed once. Sampling balances over the predicted classes.
    let encoded_all = schema.encode_batch(records);
    let predictions = blackbox.predict_labels(&encoded_all)?;
    let mut present: Vec<usize> = predictions.clone();
    present.sort_unstable();
    present.dedup();
    let dense: Vec<usize> = predictions
        .iter()
        .map(|y| present.binary_search(y).expect("present"))
        .collect();
    let sampler = BalancedSampler::new(&dense, present.len())?;

    let mut buffer: ReplayBuffer<Experience> = ReplayBuffer::new(config.buffer_capacity);
    let mut log = Vec::with_capacity(config.steps);
    let b = config.batch_size;
    let weights = LossWeights {
        lambda_s: config.lambda_s,
        lambda_c: config.lambda_c,
    };

    for step in 0..config.steps {
        // Collect.
        let rows = sampler.batch(b, &mut rng);
        let x_enc = encoded_all.select_rows(&rows);
        let z = ae.encode(&x_enc)?;
        let mut states = Matrix::zeros(b, s_dim);
        let mut conds = Vec::with_capacity(b);
        let mut targets = Vec::with_capacity(b);
        for (r, &i) in rows.iter().enumerate() {
            let y_m = predictions[i];
            let y_t = match config.target_sampling {
                TargetSampling::Uniform => sample_target(k, &mut rng),
                TargetSampling::Identity => y_m,
            };
            let cond = sample_condition(schema, &records[i], constraints, &mut rng);
            let c = encode_condition(&cond, schema);
            write_state(states.row_mut(r), z.row(r), y_m, y_t, k, &c);
            conds.push(c);
            targets.push(y_t);
        }
        let actions = select_action(&actor, &states, step, config.exploration_steps, config.noise_std, &mut rng)?;
        let decoded = ae.decode(&actions)?;
        let mut cf_enc = Matrix::zeros(b, schema.encoded_dim());
        for (r, &i) in rows.iter().enumerate() {
            let cond = decode_condition(&conds[r], schema)?;
            let cf = postprocess(decoded.row(r), &records[i], &cond, schema);
            schema.encode_into(&cf, cf_enc.row_mut(r));
        }
        let cf_pred = blackbox.predict_labels(&cf_enc)?;
        let mut reward_sum = 0.0;
        for (r, (&i, c)) in rows.iter().zip(conds).enumerate() {
            let rew = reward(cf_pred[r], targets[r]);
            reward_sum += rew;
            buffer.push(Experience {
                x: records[i].clone(),
                z: z.row(r).to_vec(),
                y_m: predictions[i],
                y_t: targets[r],
                c,
                action: actions.row(r).to_vec(),
                reward: rew,
            });
        }

        // Update.
        let mut entry = StepLog {
            step,
            reward_rate: reward_sum / b as f64,
            critic_loss: None,
            actor_loss: None,
        };
        if step >= config.warmup_steps {
            for _ in 0..config.updates_per_step {
                let slots = buffer.sample_slots(b, &mut rng);
                let mut states = Matrix::zeros(b, s_dim);
                let mut acts = Matrix::zeros(b, latent);
                let mut x_enc = Matrix::zeros(b, schema.encoded_dim());
                let mut rewards = Vec::with_capacity(b);
                let mut originals = Vec::with_capacity(b);
                let mut conditions = Vec::with_capacity(b);
                for (r, &slot) in slots.iter().enumerate() {
                    let e = buffer.get(slot);
                    write_state(states.row_mut(r), &e.z, e.y_m, e.y_t, k, &e.c);
                    acts.row_mut(r).copy_from_slice(&e.action);
                    schema.encode_into(&e.x, x_enc.row_mut(r));
                    rewards.push(e.reward);
                    originals.push(&e.x);
                    conditions.push(decode_condition(&e.c, schema)?);
                }

                let (c_loss, c_grads) = critic_loss(&critic, &states, &acts, &rewards)?;
                critic.adam_step(&c_grads, &mut critic_opt)?;

                let batch = ActorBatch { states, x_encoded: x_enc };
                let (a_loss, a_grads) = actor_loss(&actor, &critic, ae, &batch, weights, |mu| {
                    consistency_targets(mu, ae, schema, &originals, &conditions)
                })?;
                if !a_loss.total.is_finite() || !c_loss.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at step {step}")));
                }
                actor.adam_step(&a_grads, &mut actor_opt)?;
                entry.critic_loss = Some(c_loss);
                entry.actor_loss = Some(a_loss);
            }
        }
        if let Some(sink) = log_sink.as_deref_mut() {
            let line = serde_json::to_string(&entry)?;
            writeln!(sink, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        log.push(entry);
    }
    Ok(TrainedAgent { actor, critic, log })
}
