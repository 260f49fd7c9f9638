use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{OptimalWeightTable, WeightVector};
use crate::data::Dataset;
use crate::distortions::{BatchPolicy, DistortionKind, DistortionRanges, DistortionSpec};
use crate::error::{Error, Result};
use crate::experts::infer_chunked;
use crate::nn::{Gradients, LayerKind, LayerSpec, Network, Tensor};
use crate::training::{fit, Objective, Session, TrainConfig, TrainHistory};

/// The gating CNN: three conv/pool stages, two 1x1 convs, global average
/// pooling and a softmax over `n` experts.
pub fn gating_layers(n: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new("Conv1", LayerKind::conv(16, 3)),
        LayerSpec::new("Relu1", LayerKind::Relu),
        LayerSpec::new("Pool1", LayerKind::MaxPool2x2),
        LayerSpec::new("Conv2", LayerKind::conv(32, 3)),
        LayerSpec::new("Relu2", LayerKind::Relu),
        LayerSpec::new("Pool2", LayerKind::MaxPool2x2),
        LayerSpec::new("Conv3", LayerKind::conv(64, 3)),
        LayerSpec::new("Relu3", LayerKind::Relu),
        LayerSpec::new("Pool3", LayerKind::MaxPool2x2),
        LayerSpec::new("Conv4", LayerKind::conv(16, 1)),
        LayerSpec::new("Relu4", LayerKind::Relu),
        LayerSpec::new("Conv5", LayerKind::conv(n, 1)),
        LayerSpec::new("GAP", LayerKind::GlobalAvgPool),
        LayerSpec::new("Softmax", LayerKind::Softmax),
    ]
}

pub fn gating_architecture(n: usize, input: [usize; 3], seed: u64) -> Result<Network> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "a gate needs at least two experts, got {n}"
        )));
    }
    if !input[1].is_multiple_of(8) || !input[2].is_multiple_of(8) {
        return Err(Error::Shape(format!(
            "gate input {input:?} must have spatial dims divisible by 8"
        )));
    }
    Network::new(input.to_vec(), gating_layers(n), seed)
}

/// Closed-form parameter count of [`gating_architecture`].
pub fn gating_param_count(n: usize, channels: usize) -> usize {
    let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
    conv(3, channels, 16) + conv(3, 16, 32) + conv(3, 32, 64) + conv(1, 64, 16) + conv(1, 16, n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingTrainConfig {
    /// Weight of the `||g||^2` penalty.
    pub lambda: f64,
    pub policy: BatchPolicy,
    pub train: TrainConfig,
}

impl Default for GatingTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            policy: BatchPolicy::mixed(DistortionRanges::default()),
            train: TrainConfig {
                base_lr: 1e-4,
                last_layer_lr: Some(1e-3),
                ..TrainConfig::default()
            },
        }
    }
}

impl GatingTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and nonnegative"));
        }
        self.policy.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatingNetwork {
    pub network: Network,
    pub mean: Vec<f32>,
    pub history: Option<TrainHistory>,
}

impl GatingNetwork {
    /// An untrained gate that outputs uniform weights: the Xavier-initialized
    /// architecture with the final 1x1 conv weights set to zero. On raw
    /// intensities a random head saturates the softmax and the regression
    /// gradient vanishes.
    pub fn initial(num_experts: usize, train: &Dataset, seed: u64) -> Result<Self> {
        let mut network = gating_architecture(num_experts, train.image_shape(), seed)?;
        let head = network
            .params_mut()
            .get_mut("Conv5")
            .expect("gating head exists");
        head.weight.map_inplace(|_| 0.0);
        Ok(Self {
            network,
            mean: train.channel_mean(),
            history: None,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.network.num_outputs()
    }
}

/// Mixture weights for each image of a raw-intensity batch.
pub fn gate_weights(gate: &GatingNetwork, batch: &Tensor) -> Result<Vec<WeightVector>> {
    let out = infer_chunked(&gate.network, &gate.mean, batch)?;
    out.data()
        .chunks(out.sample_len())
        .map(|row| {
            let s: f64 = row.iter().map(|&x| x as f64).sum();
            WeightVector::new(row.iter().map(|&x| x as f64 / s).collect())
        })
        .collect()
}

struct GateRegression<'a> {
    table: &'a OptimalWeightTable,
    lambda: f64,
}

impl GateRegression<'_> {
    /// Per-sample losses and `dL/dg`.
    fn terms(&self, g: &Tensor, applied: &[DistortionSpec]) -> Result<(Vec<f64>, Vec<f32>)> {
        let n = g.sample_len();
        let mut losses = Vec::with_capacity(applied.len());
        let mut grad = Vec::with_capacity(g.len());
        for (b, spec) in applied.iter().enumerate() {
            let w = self.table.target(*spec)?;
            let mut loss = 0.0;
            for (j, &gj) in g.sample(b).iter().enumerate() {
                let gj = gj as f64;
                let d = gj - w.as_slice()[j];
                loss += d * d + self.lambda * gj * gj;
                grad.push((2.0 * d + 2.0 * self.lambda * gj) as f32);
            }
            debug_assert_eq!(grad.len(), (b + 1) * n);
            losses.push(loss);
        }
        Ok((losses, grad))
    }
}

impl Objective for GateRegression<'_> {
    fn loss_and_grad(
        &self,
        net: &Network,
        input: &Tensor,
        _labels: &[usize],
        applied: &[DistortionSpec],
    ) -> Result<(f64, Gradients)> {
        let trace = net.forward(input)?;
        let out = trace.output();
        let (losses, mut grad) = self.terms(out, applied)?;
        let scale = 1.0 / applied.len() as f32;
        grad.iter_mut().for_each(|g| *g *= scale);
        let grad = Tensor::new(out.shape().to_vec(), grad)?;
        let grads = net.backward_from(&trace, net.layers().len(), grad)?;
        Ok((losses.iter().sum::<f64>() / losses.len() as f64, grads))
    }

    fn loss(&self, output: &Tensor, _labels: &[usize], applied: &[DistortionSpec]) -> Result<f64> {
        Ok(self.terms(output, applied)?.0.iter().sum())
    }
}

/// Trains a gate to regress the table's weights for the distortion applied to
/// each training image. Sampled levels between grid points get interpolated
/// targets.
pub fn train_gating(
    train: &Dataset,
    val: &Dataset,
    table: &OptimalWeightTable,
    config: &GatingTrainConfig,
    init: &GatingNetwork,
) -> Result<GatingNetwork> {
    config.validate()?;
    if init.num_experts() != table.expert_names().len() {
        return Err(Error::Shape(format!(
            "gate has {} outputs, table has {} experts",
            init.num_experts(),
            table.expert_names().len()
        )));
    }
    for (kind, share) in [
        (DistortionKind::Noise, config.policy.noise),
        (DistortionKind::Blur, config.policy.blur),
    ] {
        if share == 0.0 {
            continue;
        }
        let top = *table.levels(kind)?.last().expect("grids are nonempty");
        if config.policy.ranges.max(kind) > top {
            return Err(Error::InvalidArgument(format!(
                "{kind} levels up to {} exceed the table grid (max {top})",
                config.policy.ranges.max(kind)
            )));
        }
    }
    let mut network = init.network.clone();
    let objective = GateRegression {
        table,
        lambda: config.lambda,
    };
    let session = Session {
        train,
        val,
        policy: &config.policy,
        config: &config.train,
        mean: &init.mean,
        frozen: &BTreeSet::new(),
    };
    let history = fit(&mut network, &session, &objective)?;
    Ok(GatingNetwork {
        network,
        mean: init.mean.clone(),
        history: Some(history),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_is_closed_form() {
        let net = gating_architecture(3, [1, 32, 32], 0).unwrap();
        assert_eq!(net.param_count(), gating_param_count(3, 1));
        assert_eq!(gating_param_count(3, 1), 24_387);
        let expert = crate::experts::expert_param_count(4, [1, 32, 32]);
        assert!(gating_param_count(3, 1) * 4 < expert);
    }

    #[test]
    fn outputs_are_simplex_points() {
        let ds = crate::data::synth_dataset(3, 2, 16, 0).unwrap();
        let gate = GatingNetwork::initial(3, &ds, 5).unwrap();
        let w = gate_weights(&gate, &ds.images).unwrap();
        assert_eq!(w.len(), 6);
        for v in &w {
            assert!(v.as_slice().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-6));
        }
        assert_eq!(w, gate_weights(&gate, &ds.images).unwrap());
    }

    #[test]
    fn rejects_negative_lambda() {
        let cfg = GatingTrainConfig {
            lambda: -1.0,
            ..GatingTrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
