//! Local optimisation: MSE loss, Adam with decoupled weight decay, global
//! gradient-norm clipping and the mini-batch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{loss_and_gradient, predict_nihss, GraphInput, ModelError, ModelParameters, PredictionContext};
use crate::seed::derive_seed;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("empty batch or dataset")]
    Empty,
    #[error("{0} predictions for {1} labels")]
    LengthMismatch(usize, usize),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Global L2-norm clipping threshold; `None` disables clipping.
    pub clip: Option<f64>,
    pub local_epochs: usize,
    /// Fresh Adam moments at the start of every federated round.
    pub reset_optimizer_each_round: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 2,
            clip: Some(10.0),
            local_epochs: 1,
            reset_optimizer_each_round: true,
        }
    }
}

/// Adam moment accumulators over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub n: usize,
}

pub fn mse_loss(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(TrainError::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(TrainError::Empty);
    }
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / preds.len() as f64)
}

pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scale `grads` in place so their global L2 norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [f64], threshold: f64) -> Result<f64> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    let norm = l2_norm(grads);
    if norm > threshold {
        let scale = threshold / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    Ok(norm)
}

/// One Adam step with bias correction and decoupled weight decay: parameters
/// are first multiplied by `1 − lr·wd`, then moved by the Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, config: &TrainConfig) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    assert_eq!(params.len(), state.m.len(), "optimizer state does not match parameters");
    state.step = state.step.checked_add(1).expect("optimizer step counter overflow");
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let decay = 1.0 - config.lr * config.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] * decay - config.lr * m_hat / (v_hat.sqrt() + config.eps);
    }
}

pub fn sgd_step(params: &mut [f64], direction: &[f64], lr: f64) {
    for (p, d) in params.iter_mut().zip(direction) {
        *p -= lr * d;
    }
}

/// Mean loss and mean gradient over a batch. `seed` drives dropout; `None`
/// evaluates in eval mode (no dropout).
pub fn batch_gradient(batch: &[&GraphInput], params: &ModelParameters, seed: Option<u64>) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (i, input) in batch.iter().enumerate() {
        let ctx = match seed {
            Some(s) => PredictionContext::train(derive_seed(s, &[i as u64])),
            None => PredictionContext::eval(),
        };
        let (_, l, g) = loss_and_gradient(input, params, ctx)?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    Ok((loss * inv, grad))
}

/// Seeded shuffle of `0..n` split into batches; the last partial batch is kept.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Run `config.local_epochs` epochs of shuffled mini-batch Adam.
///
/// `state` carries Adam moments; pass a fresh state to reset them. Returns
/// the updated parameters and the mean training loss of every epoch.
pub fn train_local(
    dataset: &[GraphInput],
    params: &ModelParameters,
    config: &TrainConfig,
    state: &mut OptimizerState,
    seed: u64,
) -> Result<(ModelParameters, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut current = params.clone();
    let mut flat = params.flatten();
    let mut losses = Vec::with_capacity(config.local_epochs);
    for epoch in 0..config.local_epochs {
        let epoch_seed = derive_seed(seed, &[epoch as u64]);
        let mut total = 0.0;
        for (b, idx) in shuffled_batches(dataset.len(), config.batch_size, epoch_seed).into_iter().enumerate() {
            let batch: Vec<&GraphInput> = idx.iter().map(|&i| &dataset[i]).collect();
            let (loss, mut grad) = batch_gradient(&batch, &current, Some(derive_seed(epoch_seed, &[b as u64, 1])))?;
            total += loss * batch.len() as f64;
            if let Some(t) = config.clip {
                clip_gradients(&mut grad, t)?;
            }
            adam_step(&mut flat, &grad, state, config);
            current = ModelParameters::unflatten(params.config(), &flat)?;
        }
        losses.push(total / dataset.len() as f64);
    }
    Ok((current, losses))
}

/// MAE and MSE of raw eval-mode predictions.
pub fn evaluate(dataset: &[GraphInput], params: &ModelParameters) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(TrainError::Empty);
    }
    let preds = dataset
        .iter()
        .map(|s| predict_nihss(s, params))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let labels: Vec<f64> = dataset.iter().map(|s| s.label).collect();
    Ok(metrics_from(&preds, &labels))
}

pub fn metrics_from(preds: &[f64], labels: &[f64]) -> Metrics {
    let n = preds.len();
    let mae = preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / n as f64;
    let mse = preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n as f64;
    Metrics { mae, mse, n }
}
