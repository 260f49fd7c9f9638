use std::collections::{BTreeMap, HashSet};

use super::layer::{self, xavier_init, LayerKind, LayerSpec};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape().to_vec()),
            bias: Tensor::zeros(self.bias.shape().to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sequential feed-forward network: an ordered list of named layers plus the
/// parameters of the learnable ones.
///
/// A network may be a fragment (e.g. a shared trunk) that does not end in a
/// softmax, and may even be empty, in which case it is the identity map.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// Per-sample output shape of every layer.
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, LayerParams<T>>,
}

/// Everything `forward` computed: `activations[0]` is the input and
/// `activations[i + 1]` the output of layer `i`.
#[derive(Clone, Debug)]
pub struct Trace<T = f32> {
    pub activations: Vec<Tensor<T>>,
    pool_argmax: Vec<Option<Vec<u32>>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.activations.last().expect("trace holds the input")
    }
}

#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    pub params: BTreeMap<String, LayerParams<T>>,
    pub input: Tensor<T>,
}

fn validate_layers(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::Shape(format!("invalid input shape {input_shape:?}")));
    }
    let mut seen = HashSet::new();
    let mut shapes = Vec::with_capacity(layers.len());
    let mut current = input_shape.to_vec();
    for spec in layers {
        if !seen.insert(spec.name.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate layer name `{}`",
                spec.name
            )));
        }
        current = spec.output_shape(&current)?;
        shapes.push(current.clone());
    }
    Ok(shapes)
}

impl Network<f32> {
    /// Builds a network with Xavier-uniform weights and zero biases. Each
    /// layer draws from its own stream derived from `seed` and its position.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let shapes = validate_layers(&input_shape, &layers)?;
        let mut params = BTreeMap::new();
        for (i, spec) in layers.iter().enumerate() {
            let input = if i == 0 { &input_shape } else { &shapes[i - 1] };
            if let Some((_, bias_shape)) = spec.param_shapes(input) {
                let layer_seed = seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(i as u64 + 1);
                let weight = xavier_init(spec, input, layer_seed)?;
                params.insert(
                    spec.name.clone(),
                    LayerParams {
                        weight,
                        bias: Tensor::zeros(bias_shape),
                    },
                );
            }
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            params,
        })
    }
}

impl<T: Scalar> Network<T> {
    /// Assembles a network from explicit parameters, checking every shape.
    pub fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        mut params: BTreeMap<String, LayerParams<T>>,
    ) -> Result<Self> {
        let shapes = validate_layers(&input_shape, &layers)?;
        let mut ordered = BTreeMap::new();
        for (i, spec) in layers.iter().enumerate() {
            let input = if i == 0 { &input_shape } else { &shapes[i - 1] };
            if let Some((w, b)) = spec.param_shapes(input) {
                let p = params
                    .remove(&spec.name)
                    .ok_or_else(|| Error::UnknownLayer(spec.name.clone()))?;
                if p.weight.shape() != w.as_slice() || p.bias.shape() != b.as_slice() {
                    return Err(Error::LayerShape {
                        layer: spec.name.clone(),
                        detail: format!(
                            "parameters {:?}/{:?} do not match expected {w:?}/{b:?}",
                            p.weight.shape(),
                            p.bias.shape()
                        ),
                    });
                }
                ordered.insert(spec.name.clone(), p);
            }
        }
        if let Some(extra) = params.keys().next() {
            return Err(Error::UnknownLayer(extra.clone()));
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
            params: ordered,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap_or(&self.input_shape)
    }

    /// Per-sample input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> &[usize] {
        if i == 0 {
            &self.input_shape
        } else {
            &self.shapes[i - 1]
        }
    }

    pub fn layer_output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Width of the final output vector.
    pub fn num_outputs(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn params(&self) -> &BTreeMap<String, LayerParams<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, LayerParams<T>> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(LayerParams::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        LayerParams {
                            weight: p.weight.cast(),
                            bias: p.bias.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Splits into the layers before `index` and the layers from `index` on.
    pub fn split_at(&self, index: usize) -> Result<(Network<T>, Network<T>)> {
        if index > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "split index {index} beyond {} layers",
                self.layers.len()
            )));
        }
        let take = |layers: &[LayerSpec]| {
            layers
                .iter()
                .filter_map(|l| self.params.get(&l.name).map(|p| (l.name.clone(), p.clone())))
                .collect::<BTreeMap<_, _>>()
        };
        let (head, tail) = self.layers.split_at(index);
        let front = Network::from_parts(self.input_shape.clone(), head.to_vec(), take(head))?;
        let back = Network::from_parts(
            self.layer_input_shape(index).to_vec(),
            tail.to_vec(),
            take(tail),
        )?;
        Ok((front, back))
    }

    /// Composes `self` followed by `next`.
    pub fn concat(&self, next: &Network<T>) -> Result<Network<T>> {
        if next.input_shape() != self.output_shape() {
            return Err(Error::Shape(format!(
                "cannot feed output {:?} into input {:?}",
                self.output_shape(),
                next.input_shape()
            )));
        }
        let mut layers = self.layers.clone();
        layers.extend(next.layers.iter().cloned());
        let mut params = self.params.clone();
        params.extend(next.params.iter().map(|(k, v)| (k.clone(), v.clone())));
        Network::from_parts(self.input_shape.clone(), layers, params)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..]
        {
            let layer = self
                .layers
                .first()
                .map(|l| l.name.clone())
                .unwrap_or_else(|| "<input>".into());
            return Err(Error::LayerShape {
                layer,
                detail: format!(
                    "batch shape {:?} does not match network input {:?}",
                    x.shape(),
                    self.input_shape
                ),
            });
        }
        Ok(())
    }

    fn apply_layer(&self, i: usize, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Vec<u32>>)> {
        let spec = &self.layers[i];
        let mut out_shape = vec![x.batch()];
        out_shape.extend_from_slice(&self.shapes[i]);
        let (y, argmax) = match spec.kind {
            LayerKind::Conv2d { stride, .. } => {
                let p = &self.params[&spec.name];
                (
                    layer::conv_forward(x, &p.weight, &p.bias, stride, &self.shapes[i]),
                    None,
                )
            }
            LayerKind::Dense { .. } => {
                let p = &self.params[&spec.name];
                (layer::dense_forward(x, &p.weight, &p.bias), None)
            }
            LayerKind::MaxPool2x2 => {
                let (y, idx) = layer::maxpool_forward(x);
                (y, Some(idx))
            }
            LayerKind::Relu => (layer::relu_forward(x), None),
            LayerKind::GlobalAvgPool => (layer::gap_forward(x), None),
            LayerKind::Softmax => (layer::softmax_forward(x), None),
        };
        let y = y.reshape(out_shape)?;
        if !y.is_finite() {
            return Err(Error::NonFinite {
                layer: spec.name.clone(),
            });
        }
        Ok((y, argmax))
    }

    /// Runs the batch through every layer and keeps all intermediate values.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Trace<T>> {
        self.check_input(batch)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pool_argmax = Vec::with_capacity(self.layers.len());
        activations.push(batch.clone());
        for i in 0..self.layers.len() {
            let (y, idx) = self.apply_layer(i, &activations[i])?;
            activations.push(y);
            pool_argmax.push(idx);
        }
        Ok(Trace {
            activations,
            pool_argmax,
        })
    }

    /// Forward pass that only keeps the final output.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for i in 0..self.layers.len() {
            x = self.apply_layer(i, &x)?.0;
        }
        Ok(x)
    }

    /// Gradient of the mean categorical cross-entropy between the softmax
    /// output and `targets` (rows summing to one), w.r.t. every parameter and
    /// the input.
    pub fn backward(&self, trace: &Trace<T>, targets: &Tensor<T>) -> Result<Gradients<T>> {
        let n = self.layers.len();
        if n == 0 || self.layers[n - 1].kind != LayerKind::Softmax {
            return Err(Error::InvalidArgument(
                "cross-entropy backward needs a network ending in softmax".into(),
            ));
        }
        let probs = trace.output();
        if probs.shape() != targets.shape() {
            return Err(Error::Shape(format!(
                "targets {:?} do not match outputs {:?}",
                targets.shape(),
                probs.shape()
            )));
        }
        let scale = T::of(1.0 / probs.batch() as f64);
        let data = probs
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &t)| (p - t) * scale)
            .collect();
        let dlogits = Tensor::new(probs.shape().to_vec(), data)?;
        self.backward_from(trace, n - 1, dlogits)
    }

    /// Backpropagates `grad`, the gradient w.r.t. `trace.activations[top]`,
    /// down to the input.
    pub fn backward_from(
        &self,
        trace: &Trace<T>,
        top: usize,
        grad: Tensor<T>,
    ) -> Result<Gradients<T>> {
        if trace.activations.len() != self.layers.len() + 1 || top > self.layers.len() {
            return Err(Error::InvalidArgument(
                "trace was not produced by this network".into(),
            ));
        }
        if grad.shape() != trace.activations[top].shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} does not match activation {:?}",
                grad.shape(),
                trace.activations[top].shape()
            )));
        }
        let mut params: BTreeMap<String, LayerParams<T>> = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), p.zeros_like()))
            .collect();
        let mut g = grad;
        for i in (0..top).rev() {
            let spec = &self.layers[i];
            let x = &trace.activations[i];
            g = match spec.kind {
                LayerKind::Conv2d { stride, .. } => {
                    let p = &self.params[&spec.name];
                    let (dx, dw, db) = layer::conv_backward(x, &p.weight, stride, &g);
                    params.insert(spec.name.clone(), LayerParams { weight: dw, bias: db });
                    dx
                }
                LayerKind::Dense { .. } => {
                    let p = &self.params[&spec.name];
                    let (dx, dw, db) = layer::dense_backward(x, &p.weight, &g);
                    params.insert(spec.name.clone(), LayerParams { weight: dw, bias: db });
                    dx.reshape(x.shape().to_vec())?
                }
                LayerKind::Relu => layer::relu_backward(x, &g),
                LayerKind::MaxPool2x2 => {
                    let idx = trace.pool_argmax[i]
                        .as_ref()
                        .expect("pool layers record their argmax");
                    layer::maxpool_backward(x.shape(), idx, &g)
                }
                LayerKind::GlobalAvgPool => layer::gap_backward(x.shape(), &g),
                LayerKind::Softmax => layer::softmax_backward(&trace.activations[i + 1], &g),
            };
        }
        Ok(Gradients { params, input: g })
    }
}

/// Mean categorical cross-entropy of probability rows against target rows.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, targets: &Tensor<T>) -> f64 {
    let total: f64 = probs
        .data()
        .iter()
        .zip(targets.data())
        .filter(|(_, t)| t.as_f64() != 0.0)
        .map(|(p, t)| -t.as_f64() * p.as_f64().max(1e-12).ln())
        .sum();
    total / probs.batch() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::one_hot;

    fn small_net() -> Network {
        Network::new(
            vec![1, 4, 4],
            vec![
                LayerSpec::new("c1", LayerKind::conv(2, 3)),
                LayerSpec::new("r1", LayerKind::Relu),
                LayerSpec::new("p1", LayerKind::MaxPool2x2),
                LayerSpec::new("fc", LayerKind::Dense { units: 3 }),
                LayerSpec::new("sm", LayerKind::Softmax),
            ],
            1,
        )
        .unwrap()
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let err = Network::new(
            vec![3],
            vec![
                LayerSpec::new("a", LayerKind::Dense { units: 2 }),
                LayerSpec::new("a", LayerKind::Softmax),
            ],
            0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn zero_final_layer_gives_uniform_softmax() {
        let mut net = small_net();
        let p = net.params_mut().get_mut("fc").unwrap();
        p.weight.data_mut().fill(0.0);
        let x = Tensor::full(vec![2, 1, 4, 4], 3.0);
        let y = net.infer(&x).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_names_the_first_layer() {
        let net = small_net();
        let x = Tensor::full(vec![2, 1, 5, 4], 3.0);
        match net.forward(&x) {
            Err(Error::LayerShape { layer, .. }) => assert_eq!(layer, "c1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn confident_correct_prediction_has_zero_gradient() {
        let mut net = small_net();
        let p = net.params_mut().get_mut("fc").unwrap();
        p.weight.data_mut().fill(0.0);
        p.bias.data_mut().copy_from_slice(&[200.0, 0.0, 0.0]);
        let x = Tensor::full(vec![1, 1, 4, 4], 1.0);
        let trace = net.forward(&x).unwrap();
        let grads = net.backward(&trace, &one_hot(&[0], 3).unwrap()).unwrap();
        for p in grads.params.values() {
            assert!(p.weight.data().iter().all(|v| v.abs() < 1e-6));
            assert!(p.bias.data().iter().all(|v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn duplicating_the_batch_keeps_mean_gradients() {
        let net = small_net();
        let x = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|v| (v as f32).sin()).collect())
            .unwrap();
        let t = one_hot(&[0, 2], 3).unwrap();
        let g1 = net.backward(&net.forward(&x).unwrap(), &t).unwrap();
        let x2 = x.select(&[0, 0, 1, 1]);
        let t2 = t.select(&[0, 0, 1, 1]);
        let g2 = net.backward(&net.forward(&x2).unwrap(), &t2).unwrap();
        for (k, a) in &g1.params {
            let b = &g2.params[k];
            for (u, v) in a.weight.data().iter().zip(b.weight.data()) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_rejects_mismatched_targets() {
        let net = small_net();
        let x = Tensor::full(vec![2, 1, 4, 4], 1.0);
        let trace = net.forward(&x).unwrap();
        assert!(net.backward(&trace, &one_hot(&[0], 3).unwrap()).is_err());
    }

    #[test]
    fn split_then_concat_is_lossless() {
        let net = small_net();
        for i in 0..=net.layers().len() {
            let (a, b) = net.split_at(i).unwrap();
            assert_eq!(a.concat(&b).unwrap(), net);
        }
    }
}
