use std::collections::{BTreeMap, BTreeSet};

use super::network::{Gradients, LayerParams, Network};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// SGD with classical momentum: `v <- momentum * v - lr * g; p <- p + v`.
#[derive(Clone, Debug)]
pub struct OptimizerState<T = f32> {
    velocity: BTreeMap<String, LayerParams<T>>,
    learning_rates: BTreeMap<String, f64>,
    momentum: f64,
}

impl<T: Scalar> OptimizerState<T> {
    /// Every learnable layer gets `default_lr` unless `overrides` names it.
    pub fn new(
        net: &Network<T>,
        default_lr: f64,
        overrides: &BTreeMap<String, f64>,
        momentum: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        let mut learning_rates = BTreeMap::new();
        let mut velocity = BTreeMap::new();
        for (name, p) in net.params() {
            let lr = overrides.get(name).copied().unwrap_or(default_lr);
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "learning rate for `{name}` must be positive, got {lr}"
                )));
            }
            learning_rates.insert(name.clone(), lr);
            velocity.insert(
                name.clone(),
                LayerParams {
                    weight: Tensor::zeros(p.weight.shape().to_vec()),
                    bias: Tensor::zeros(p.bias.shape().to_vec()),
                },
            );
        }
        if let Some(unknown) = overrides.keys().find(|k| !net.params().contains_key(*k)) {
            return Err(Error::UnknownLayer(unknown.clone()));
        }
        Ok(Self {
            velocity,
            learning_rates,
            momentum,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn learning_rate(&self, layer: &str) -> Option<f64> {
        self.learning_rates.get(layer).copied()
    }

    /// Applies one update to every non-frozen layer. Frozen layers and their
    /// velocities are left untouched.
    pub fn step(
        &mut self,
        net: &mut Network<T>,
        grads: &Gradients<T>,
        frozen: &BTreeSet<String>,
    ) -> Result<()> {
        if let Some(unknown) = frozen.iter().find(|n| !net.params().contains_key(*n)) {
            return Err(Error::UnknownLayer(unknown.clone()));
        }
        let momentum = T::of(self.momentum);
        for (name, p) in net.params_mut() {
            if frozen.contains(name) {
                continue;
            }
            let g = grads
                .params
                .get(name)
                .ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            let v = self
                .velocity
                .get_mut(name)
                .ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            let lr = T::of(self.learning_rates[name]);
            for (param, vel, grad) in [
                (&mut p.weight, &mut v.weight, &g.weight),
                (&mut p.bias, &mut v.bias, &g.bias),
            ] {
                if param.shape() != grad.shape() {
                    return Err(Error::Shape(format!(
                        "gradient for `{name}` has shape {:?}, parameter {:?}",
                        grad.shape(),
                        param.shape()
                    )));
                }
                for ((pv, vv), &gv) in param
                    .data_mut()
                    .iter_mut()
                    .zip(vel.data_mut().iter_mut())
                    .zip(grad.data())
                {
                    *vv = momentum * *vv - lr * gv;
                    *pv = *pv + *vv;
                }
            }
        }
        Ok(())
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn sgd_step<T: Scalar>(
    net: &mut Network<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    frozen: &BTreeSet<String>,
) -> Result<()> {
    state.step(net, grads, frozen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerKind, LayerSpec};

    fn net() -> Network<f64> {
        Network::new(
            vec![3],
            vec![
                LayerSpec::new("a", LayerKind::Dense { units: 4 }),
                LayerSpec::new("b", LayerKind::Dense { units: 2 }),
                LayerSpec::new("sm", LayerKind::Softmax),
            ],
            5,
        )
        .unwrap()
        .cast()
    }

    fn ones_like(net: &Network<f64>) -> Gradients<f64> {
        Gradients {
            params: net
                .params()
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        LayerParams {
                            weight: Tensor::full(p.weight.shape().to_vec(), 1.0),
                            bias: Tensor::full(p.bias.shape().to_vec(), 1.0),
                        },
                    )
                })
                .collect(),
            input: Tensor::zeros(vec![1, 3]),
        }
    }

    #[test]
    fn plain_step_moves_by_learning_rate() {
        let mut n = net();
        let before = n.clone();
        let g = ones_like(&n);
        let mut st = OptimizerState::new(&n, 0.1, &BTreeMap::new(), 0.0).unwrap();
        sgd_step(&mut n, &g, &mut st, &BTreeSet::new()).unwrap();
        for (k, p) in n.params() {
            for (a, b) in p.weight.data().iter().zip(before.params()[k].weight.data()) {
                assert!((b - a - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn momentum_recurrence_second_step() {
        let mut n = net();
        let g = ones_like(&n);
        let mut st = OptimizerState::new(&n, 0.01, &BTreeMap::new(), 0.9).unwrap();
        sgd_step(&mut n, &g, &mut st, &BTreeSet::new()).unwrap();
        let mid = n.clone();
        sgd_step(&mut n, &g, &mut st, &BTreeSet::new()).unwrap();
        for (k, p) in n.params() {
            for (a, b) in p.bias.data().iter().zip(mid.params()[k].bias.data()) {
                assert!((a - b + 0.019).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_layers_stay_bit_identical() {
        let mut n = net();
        let before = n.clone();
        let g = ones_like(&n);
        let mut st = OptimizerState::new(&n, 0.5, &BTreeMap::new(), 0.9).unwrap();
        let all: BTreeSet<String> = ["a".to_string(), "b".to_string()].into();
        for _ in 0..5 {
            sgd_step(&mut n, &g, &mut st, &all).unwrap();
        }
        assert_eq!(n, before);
        let only_a: BTreeSet<String> = ["a".to_string()].into();
        sgd_step(&mut n, &g, &mut st, &only_a).unwrap();
        assert_eq!(n.params()["a"], before.params()["a"]);
        assert_ne!(n.params()["b"], before.params()["b"]);
    }

    #[test]
    fn unknown_frozen_layer_is_an_error() {
        let mut n = net();
        let g = ones_like(&n);
        let mut st = OptimizerState::new(&n, 0.5, &BTreeMap::new(), 0.9).unwrap();
        let bogus: BTreeSet<String> = ["zzz".to_string()].into();
        assert!(matches!(
            sgd_step(&mut n, &g, &mut st, &bogus),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn per_layer_learning_rates() {
        let n = net();
        let lrs: BTreeMap<String, f64> = [("b".to_string(), 0.01)].into();
        let st = OptimizerState::new(&n, 0.001, &lrs, 0.9).unwrap();
        assert_eq!(st.learning_rate("a"), Some(0.001));
        assert_eq!(st.learning_rate("b"), Some(0.01));
    }
}
