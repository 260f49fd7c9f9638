//! Shared mini-batch SGD loop with on-line distortion and early stopping.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{preprocess, Dataset};
use crate::distortions::{distort_batch, BatchPolicy, DistortionSpec};
use crate::error::{Error, Result};
use crate::nn::{Gradients, Network, OptimizerState, Tensor};
use crate::seed::mix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Learning rate of the final learnable layer; `None` uses `base_lr`.
    pub last_layer_lr: Option<f64>,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            patience: 3,
            batch_size: 32,
            base_lr: 0.001,
            last_layer_lr: Some(0.01),
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 4 {
            return Err(Error::config("batch_size", "must be at least 4"));
        }
        if self.patience < 1 {
            return Err(Error::config("patience", "must be at least 1"));
        }
        if self.max_epochs < 1 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if !(self.base_lr > 0.0) || self.last_layer_lr.is_some_and(|lr| !(lr > 0.0)) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// What the loop minimizes. `loss_and_grad` returns the mean batch loss and
/// its gradients; `loss` returns the summed loss over a batch.
pub(crate) trait Objective {
    fn loss_and_grad(
        &self,
        net: &Network,
        input: &Tensor,
        labels: &[usize],
        applied: &[DistortionSpec],
    ) -> Result<(f64, Gradients)>;

    fn loss(
        &self,
        output: &Tensor,
        labels: &[usize],
        applied: &[DistortionSpec],
    ) -> Result<f64>;
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Zero-based epoch whose parameters were returned; `None` when no epoch
    /// beat the initial parameters.
    pub best_epoch: Option<usize>,
}

struct FixedBatches {
    inputs: Vec<Tensor>,
    labels: Vec<Vec<usize>>,
    applied: Vec<Vec<DistortionSpec>>,
}

/// Distorts the validation set once, in training-sized chunks, so every epoch
/// is scored on the same inputs.
fn fixed_validation(
    val: &Dataset,
    policy: &BatchPolicy,
    mean: &[f32],
    batch_size: usize,
    seed: u64,
) -> Result<FixedBatches> {
    let mut out = FixedBatches {
        inputs: Vec::new(),
        labels: Vec::new(),
        applied: Vec::new(),
    };
    let idx: Vec<usize> = (0..val.len()).collect();
    for (k, chunk) in idx.chunks(batch_size).enumerate() {
        let raw = val.images.select(chunk);
        let (distorted, applied) = distort_batch(&raw, policy, mix(seed, k as u64))?;
        out.inputs.push(preprocess(&distorted, mean)?);
        out.labels.push(chunk.iter().map(|&i| val.labels[i]).collect());
        out.applied.push(applied);
    }
    Ok(out)
}

fn validation_loss(
    net: &Network,
    objective: &dyn Objective,
    batches: &FixedBatches,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for ((x, labels), applied) in batches.inputs.iter().zip(&batches.labels).zip(&batches.applied)
    {
        let out = net.infer(x)?;
        total += objective.loss(&out, labels, applied)?;
        n += labels.len();
    }
    Ok(total / n as f64)
}

pub(crate) struct Session<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub policy: &'a BatchPolicy,
    pub config: &'a TrainConfig,
    pub mean: &'a [f32],
    pub frozen: &'a BTreeSet<String>,
}

/// Trains `net` in place and leaves it at the epoch with the lowest
/// validation loss.
pub(crate) fn fit(
    net: &mut Network,
    session: &Session<'_>,
    objective: &dyn Objective,
) -> Result<TrainHistory> {
    let Session {
        train,
        val,
        policy,
        config,
        mean,
        frozen,
    } = *session;
    config.validate()?;
    policy.validate()?;
    let mut overrides = BTreeMap::new();
    if let Some(lr) = config.last_layer_lr {
        let last = net
            .layers()
            .iter()
            .rev()
            .find(|l| l.kind.is_learnable())
            .ok_or_else(|| Error::InvalidArgument("network has nothing to train".into()))?;
        overrides.insert(last.name.clone(), lr);
    }
    let mut opt = OptimizerState::new(net, config.base_lr, &overrides, config.momentum)?;
    let val_batches = fixed_validation(val, policy, mean, config.batch_size, mix(config.seed, 1))?;

    let mut history = TrainHistory::default();
    let mut best = (validation_loss(net, objective, &val_batches)?, net.clone());
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 0..config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 1000 + epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let raw = train.images.select(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (distorted, applied) =
                distort_batch(&raw, policy, mix(config.seed, 1 << 32 | step as u64))?;
            let x = preprocess(&distorted, mean)?;
            let (loss, grads) = match objective.loss_and_grad(net, &x, &labels, &applied) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            opt.step(net, &grads, frozen)?;
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        let val_loss = validation_loss(net, objective, &val_batches)?;
        history.train_loss.push(epoch_loss / batches as f64);
        history.val_loss.push(val_loss);
        if val_loss < best.0 {
            best = (val_loss, net.clone());
            history.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    *net = best.1;
    Ok(history)
}
