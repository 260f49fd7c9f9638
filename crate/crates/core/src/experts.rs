//! Distortion-specialized expert networks: architecture, training, inference
//! and activation-maximization visualization.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{preprocess, Dataset};
use crate::distortions::{BatchPolicy, DistortionKind, DistortionRanges, DistortionSpec};
use crate::error::{Error, Result};
use crate::eval::Classifier;
use crate::nn::{argmax, cross_entropy, one_hot, Gradients, LayerKind, LayerSpec, Network, Tensor};
use crate::training::{fit, Objective, Session, TrainConfig, TrainHistory};

/// Names of the learnable layers of the expert architecture, in order. These
/// double as the branch points of tree ensembles.
pub const EXPERT_LAYERS: [&str; 6] = ["Conv1", "Conv2", "Conv3", "FC6", "FC7", "FC8"];

/// Inference batch size; bounds peak activation memory.
const INFER_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Specialization {
    Clean,
    Noise,
    Blur,
    All,
}

impl Specialization {
    pub const ENSEMBLE: [Specialization; 3] =
        [Specialization::Clean, Specialization::Noise, Specialization::Blur];

    pub fn as_str(&self) -> &'static str {
        match self {
            Specialization::Clean => "clean",
            Specialization::Noise => "noise",
            Specialization::Blur => "blur",
            Specialization::All => "all",
        }
    }

    /// Training policy: half of every batch stays clean.
    pub fn policy(&self, ranges: DistortionRanges) -> BatchPolicy {
        match self {
            Specialization::Clean => BatchPolicy::all_clean(ranges),
            Specialization::Noise => BatchPolicy::half(DistortionKind::Noise, ranges),
            Specialization::Blur => BatchPolicy::half(DistortionKind::Blur, ranges),
            Specialization::All => BatchPolicy::mixed(ranges),
        }
    }

    /// Whether a batch policy trains this specialization.
    pub fn matches(&self, policy: &BatchPolicy) -> bool {
        match self {
            Specialization::Clean => policy.noise == 0.0 && policy.blur == 0.0,
            Specialization::Noise => policy.noise > 0.0 && policy.blur == 0.0,
            Specialization::Blur => policy.blur > 0.0 && policy.noise == 0.0,
            Specialization::All => policy.noise > 0.0 && policy.blur > 0.0,
        }
    }
}

impl fmt::Display for Specialization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Specialization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Self::Clean),
            "noise" => Ok(Self::Noise),
            "blur" => Ok(Self::Blur),
            "all" => Ok(Self::All),
            other => Err(Error::InvalidArgument(format!(
                "unknown specialization `{other}` (expected clean, noise, blur or all)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub policy: BatchPolicy,
    pub config: TrainConfig,
    pub history: TrainHistory,
    /// Hash of the experiment configuration that produced the model.
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertModel {
    pub network: Network,
    pub specialization: Specialization,
    /// Per-channel mean subtracted from raw intensities before the network.
    pub mean: Vec<f32>,
    pub provenance: Option<Provenance>,
}

/// The desk-scale expert CNN. Spatial dims must be divisible by 8.
pub fn expert_layers(num_classes: usize) -> Vec<LayerSpec> {
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
        LayerSpec::new("FC6", LayerKind::Dense { units: 128 }),
        LayerSpec::new("Relu6", LayerKind::Relu),
        LayerSpec::new("FC7", LayerKind::Dense { units: 64 }),
        LayerSpec::new("Relu7", LayerKind::Relu),
        LayerSpec::new("FC8", LayerKind::Dense { units: num_classes }),
        LayerSpec::new("Softmax", LayerKind::Softmax),
    ]
}

pub fn expert_architecture(num_classes: usize, input: [usize; 3], seed: u64) -> Result<Network> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "an expert needs at least two classes, got {num_classes}"
        )));
    }
    if !input[1].is_multiple_of(8) || !input[2].is_multiple_of(8) {
        return Err(Error::Shape(format!(
            "expert input {input:?} must have spatial dims divisible by 8"
        )));
    }
    Network::new(input.to_vec(), expert_layers(num_classes), seed)
}

/// Closed-form parameter count of [`expert_architecture`].
pub fn expert_param_count(num_classes: usize, [c, h, w]: [usize; 3]) -> usize {
    let conv = |cin: usize, cout: usize| 9 * cin * cout + cout;
    let dense = |din: usize, dout: usize| din * dout + dout;
    conv(c, 16)
        + conv(16, 32)
        + conv(32, 64)
        + dense(64 * (h / 8) * (w / 8), 128)
        + dense(128, 64)
        + dense(64, num_classes)
}

pub(crate) struct CrossEntropy {
    pub num_classes: usize,
}

impl Objective for CrossEntropy {
    fn loss_and_grad(
        &self,
        net: &Network,
        input: &Tensor,
        labels: &[usize],
        _applied: &[DistortionSpec],
    ) -> Result<(f64, Gradients)> {
        let trace = net.forward(input)?;
        let targets = one_hot(labels, self.num_classes)?;
        let loss = cross_entropy(trace.output(), &targets);
        Ok((loss, net.backward(&trace, &targets)?))
    }

    fn loss(&self, output: &Tensor, labels: &[usize], _: &[DistortionSpec]) -> Result<f64> {
        let targets = one_hot(labels, self.num_classes)?;
        Ok(cross_entropy(output, &targets) * labels.len() as f64)
    }
}

/// Fine-tunes `init` on `train` with on-line distortion from `policy`,
/// early-stopping on the validation loss. Layers in `frozen` keep their
/// parameters bit-exactly.
pub fn train_expert_frozen(
    train: &Dataset,
    val: &Dataset,
    policy: &BatchPolicy,
    config: &TrainConfig,
    init: &ExpertModel,
    frozen: &BTreeSet<String>,
) -> Result<ExpertModel> {
    if init.network.input_shape() != train.image_shape() {
        return Err(Error::Shape(format!(
            "model input {:?} does not match dataset images {:?}",
            init.network.input_shape(),
            train.image_shape()
        )));
    }
    if init.network.num_outputs() != train.num_classes {
        return Err(Error::Shape(format!(
            "model predicts {} classes, dataset has {}",
            init.network.num_outputs(),
            train.num_classes
        )));
    }
    let specialization = [
        Specialization::Clean,
        Specialization::Noise,
        Specialization::Blur,
        Specialization::All,
    ]
    .into_iter()
    .find(|s| s.matches(policy))
    .ok_or_else(|| Error::InvalidArgument("policy does not match a specialization".into()))?;
    let mut network = init.network.clone();
    let objective = CrossEntropy {
        num_classes: train.num_classes,
    };
    let session = Session {
        train,
        val,
        policy,
        config,
        mean: &init.mean,
        frozen,
    };
    let history = fit(&mut network, &session, &objective)?;
    Ok(ExpertModel {
        network,
        specialization,
        mean: init.mean.clone(),
        provenance: Some(Provenance {
            policy: *policy,
            config: config.clone(),
            history,
            config_hash: init
                .provenance
                .as_ref()
                .map(|p| p.config_hash.clone())
                .unwrap_or_default(),
        }),
    })
}

pub fn train_expert(
    train: &Dataset,
    val: &Dataset,
    policy: &BatchPolicy,
    config: &TrainConfig,
    init: &ExpertModel,
) -> Result<ExpertModel> {
    train_expert_frozen(train, val, policy, config, init, &BTreeSet::new())
}

impl ExpertModel {
    /// A freshly initialized clean-specialization model whose mean comes from
    /// `train`.
    pub fn initial(train: &Dataset, seed: u64) -> Result<Self> {
        Ok(Self {
            network: expert_architecture(train.num_classes, train.image_shape(), seed)?,
            specialization: Specialization::Clean,
            mean: train.channel_mean(),
            provenance: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.network.num_outputs()
    }

    /// Softmax probabilities `(B, num_classes)` for raw-intensity images.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        infer_chunked(&self.network, &self.mean, batch)
    }
}

/// Mean-subtracts and runs `net` in bounded chunks.
pub(crate) fn infer_chunked(net: &Network, mean: &[f32], batch: &Tensor) -> Result<Tensor> {
    let n = batch.batch();
    let mut parts = Vec::with_capacity(n.div_ceil(INFER_CHUNK));
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(INFER_CHUNK) {
        let x = if chunk.len() == n {
            preprocess(batch, mean)?
        } else {
            preprocess(&batch.select(chunk), mean)?
        };
        parts.push(net.infer(&x)?);
    }
    Tensor::stack(&parts)
}

pub fn predict(model: &ExpertModel, batch: &Tensor) -> Result<Tensor> {
    model.predict(batch)
}

impl Classifier for ExpertModel {
    fn classify(&self, images: &Tensor) -> Result<Vec<usize>> {
        let p = self.predict(images)?;
        Ok(p.data().chunks(p.sample_len()).map(argmax).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualizeConfig {
    pub steps: usize,
    /// Step length in intensity units along the RMS-normalized gradient.
    pub step_size: f64,
    /// Weight of the mean squared (mean-subtracted) pixel penalty.
    pub l2: f64,
    pub seed: u64,
}

impl Default for VisualizeConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            step_size: 4.0,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Visualization {
    /// `(C, H, W)` image in `[0, 255]`.
    pub image: Tensor,
    /// Unit activation before the first step and after every step.
    pub trajectory: Vec<f64>,
    /// The optimization could not raise the activation above its start.
    pub turned_off: bool,
}

/// Gradient ascent on the input pixels to maximize the mean activation of one
/// unit (a channel of a feature map, or a dense unit) of `layer`.
///
/// Steps that would lower the activation are retried at half length, so the
/// trajectory never decreases.
pub fn visualize_neuron(
    model: &ExpertModel,
    layer: &str,
    unit: usize,
    config: &VisualizeConfig,
) -> Result<Visualization> {
    let li = model
        .network
        .layer_index(layer)
        .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
    let out_shape = model.network.layer_output_shape(li).to_vec();
    if unit >= out_shape[0] {
        return Err(Error::InvalidArgument(format!(
            "layer `{layer}` has {} units, asked for unit {unit}",
            out_shape[0]
        )));
    }
    let (prefix, _) = model.network.split_at(li + 1)?;
    let plane: usize = out_shape[1..].iter().product();
    let input_shape = prefix.input_shape().to_vec();
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(&input_shape);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let npix: usize = input_shape.iter().product();
    let mut image = Tensor::new(
        batch_shape.clone(),
        (0..npix).map(|_| rng.random_range(0.0f32..255.0)).collect(),
    )?;

    let evaluate = |img: &Tensor, with_grad: bool| -> Result<(f64, Option<Vec<f32>>)> {
        let x = preprocess(img, &model.mean)?;
        let trace = prefix.forward(&x)?;
        let act = trace.output();
        let unit_vals = &act.data()[unit * plane..(unit + 1) * plane];
        let value = unit_vals.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        if !with_grad {
            return Ok((value, None));
        }
        let mut g = Tensor::zeros(act.shape().to_vec());
        g.data_mut()[unit * plane..(unit + 1) * plane].fill(1.0 / plane as f32);
        let grads = prefix.backward_from(&trace, prefix.layers().len(), g)?;
        let mut dx = grads.input.into_data();
        for (d, &xc) in dx.iter_mut().zip(x.data()) {
            *d -= (2.0 * config.l2 / npix as f64) as f32 * xc;
        }
        Ok((value, Some(dx)))
    };

    let (mut current, _) = evaluate(&image, false)?;
    let mut trajectory = vec![current];
    for _ in 0..config.steps {
        let (_, grad) = evaluate(&image, true)?;
        let grad = grad.expect("gradient requested");
        let rms = (grad.iter().map(|&g| (g as f64).powi(2)).sum::<f64>() / npix as f64).sqrt();
        if rms > 0.0 {
            let mut step = config.step_size / rms;
            for _ in 0..10 {
                let mut candidate = image.clone();
                for (p, &g) in candidate.data_mut().iter_mut().zip(&grad) {
                    *p = (*p as f64 + step * g as f64).clamp(0.0, 255.0) as f32;
                }
                let (value, _) = evaluate(&candidate, false)?;
                if value >= current {
                    image = candidate;
                    current = value;
                    break;
                }
                step *= 0.5;
            }
        }
        trajectory.push(current);
    }
    let turned_off = current <= trajectory[0] + 1e-6;
    Ok(Visualization {
        image: image.reshape(input_shape)?,
        trajectory,
        turned_off,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn architecture_shapes_and_closed_form_count() {
        for k in [2, 4, 10] {
            let net = expert_architecture(k, [1, 32, 32], 0).unwrap();
            assert_eq!(net.num_outputs(), k);
            assert_eq!(net.param_count(), expert_param_count(k, [1, 32, 32]));
        }
        let net = expert_architecture(4, [3, 32, 32], 0).unwrap();
        assert_eq!(net.param_count(), expert_param_count(4, [3, 32, 32]));
        // Conv1 160 + Conv2 4640 + Conv3 18496 + FC6 131200 + FC7 8256 + FC8 260
        assert_eq!(expert_param_count(4, [1, 32, 32]), 163_012);
        let x = Tensor::full(vec![3, 1, 32, 32], 0.5);
        assert_eq!(net.params()["FC8"].bias.len(), 4);
        let gray = expert_architecture(4, [1, 32, 32], 0).unwrap();
        assert_eq!(gray.infer(&x).unwrap().shape(), &[3, 4]);
        assert!(expert_architecture(1, [1, 32, 32], 0).is_err());
        assert!(expert_architecture(3, [1, 30, 32], 0).is_err());
    }

    fn tiny_model() -> ExpertModel {
        ExpertModel {
            network: expert_architecture(3, [1, 16, 16], 4).unwrap(),
            specialization: Specialization::Clean,
            mean: vec![120.0],
            provenance: None,
        }
    }

    #[test]
    fn predictions_are_distributions_and_match_forward() {
        let m = tiny_model();
        let x = Tensor::new(
            vec![2, 1, 16, 16],
            (0..512).map(|i| ((i * 13) % 256) as f32).collect(),
        )
        .unwrap();
        let p = m.predict(&x).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let direct = m
            .network
            .forward(&preprocess(&x, &m.mean).unwrap())
            .unwrap();
        assert_eq!(direct.output(), &p);
        let dup = m.predict(&x.select(&[1, 1])).unwrap();
        assert_eq!(dup.sample(0), dup.sample(1));
        let wrong = Tensor::full(vec![1, 1, 8, 8], 1.0);
        assert!(m.predict(&wrong).is_err());
    }

    #[test]
    fn visualization_of_dead_unit_is_flagged() {
        let mut m = tiny_model();
        let w = &mut m.network.params_mut().get_mut("Conv2").unwrap().weight;
        let per_filter = w.len() / 32;
        w.data_mut()[5 * per_filter..6 * per_filter].fill(0.0);
        let v = visualize_neuron(&m, "Conv2", 5, &VisualizeConfig::default()).unwrap();
        assert!(v.turned_off);
        assert!(v.image.data().iter().all(|p| p.is_finite() && (0.0..=255.0).contains(p)));
    }

    #[test]
    fn live_unit_trajectory_never_decreases() {
        let m = tiny_model();
        let v = visualize_neuron(&m, "Conv3", 2, &VisualizeConfig::default()).unwrap();
        assert_eq!(v.trajectory.len(), 101);
        for pair in v.trajectory.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9);
        }
        assert!(!v.turned_off);
        assert!(v.image.data().iter().all(|p| (0.0..=255.0).contains(p)));
    }

    #[test]
    fn visualization_rejects_unknown_layer_or_unit() {
        let m = tiny_model();
        let cfg = VisualizeConfig::default();
        assert!(matches!(
            visualize_neuron(&m, "Conv9", 0, &cfg),
            Err(Error::UnknownLayer(_))
        ));
        assert!(visualize_neuron(&m, "Conv1", 16, &cfg).is_err());
    }

    #[test]
    fn specialization_matches_policy() {
        let r = DistortionRanges::default();
        for s in [
            Specialization::Clean,
            Specialization::Noise,
            Specialization::Blur,
            Specialization::All,
        ] {
            assert!(s.matches(&s.policy(r)));
            assert_eq!(s.as_str().parse::<Specialization>().unwrap(), s);
        }
    }
}
