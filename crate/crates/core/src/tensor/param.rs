use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Gradients, Scalar, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A learnable tensor with its gradient and momentum buffer.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
    has_grad: bool,
}

impl<T: Scalar> Parameter<T> {
    fn new(name: String, tensor: Tensor<T>) -> Self {
        let grad = Tensor::zeros(tensor.shape().to_vec());
        let momentum = Tensor::zeros(tensor.shape().to_vec());
        Parameter {
            name,
            tensor,
            grad,
            momentum,
            has_grad: false,
        }
    }

    pub fn has_grad(&self) -> bool {
        self.has_grad
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Owner of every parameter of a model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.params.push(Parameter::new(name.into(), tensor));
        ParamId(self.params.len() - 1)
    }

    /// He-normal initialised weight: std = gain * sqrt(2 / fan_in).
    pub fn add_he(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> ParamId {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        self.add_normal(name, shape, std, rng)
    }

    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape matches data"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Add `scale * grad` into each bound parameter's gradient buffer.
    /// Parameters bound on the graph but unreachable from the loss count as
    /// having a zero gradient.
    pub fn accumulate(&mut self, grads: &Gradients<T>, scale: T) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if let Some(g) = g {
                for (acc, &v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += scale * v;
                }
            }
            p.has_grad = true;
        }
    }

    /// Add a raw gradient buffer (same layout as [`accumulate`]).
    pub fn accumulate_raw(&mut self, id: ParamId, grad: &[T], scale: T) {
        let p = &mut self.params[id.0];
        for (acc, &v) in p.grad.data_mut().iter_mut().zip(grad) {
            *acc += scale * v;
        }
        p.has_grad = true;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
            p.has_grad = false;
        }
    }

    /// One momentum-SGD update:
    /// `v <- momentum * v + grad + weight_decay * p; p <- p - lr * v`.
    /// Gradients are zeroed afterwards. Fails if any parameter has not
    /// received a gradient since the last step.
    pub fn sgd_step(&mut self, cfg: &SgdConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| !p.has_grad) {
            return Err(Error::State(format!("parameter `{}` has no gradient", p.name)));
        }
        let lr = T::lit(cfg.lr);
        let mu = T::lit(cfg.momentum);
        let wd = T::lit(cfg.weight_decay);
        for p in &mut self.params {
            let Parameter {
                tensor, grad, momentum, ..
            } = p;
            for ((w, v), &g) in tensor.data_mut().iter_mut().zip(momentum.data_mut().iter_mut()).zip(grad.data()) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
            if !tensor.all_finite() {
                return Err(Error::Numerical(format!("parameter `{}` became non-finite", p.name)));
            }
        }
        self.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::from_f64([values.len()], values).unwrap());
        (s, id)
    }

    #[test]
    fn zero_grad_zero_momentum_no_decay_is_noop() {
        let (mut s, id) = store_with(&[1.0, -2.0]);
        s.accumulate_raw(id, &[0.0, 0.0], 1.0);
        s.sgd_step(&SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        })
        .unwrap();
        assert_eq!(s.get(id).tensor.data(), &[1.0, -2.0]);
    }

    #[test]
    fn single_plain_step_subtracts_lr_times_grad() {
        let (mut s, id) = store_with(&[1.0, -2.0]);
        s.accumulate_raw(id, &[0.5, -1.0], 1.0);
        s.sgd_step(&SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        })
        .unwrap();
        assert_eq!(s.get(id).tensor.data(), &[1.0 - 0.05, -2.0 + 0.1]);
        assert!(s.get(id).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn two_momentum_steps_match_unrolled_recurrence() {
        let (lr, mu, wd) = (0.1, 0.9, 1e-4);
        let (g1, g2) = (0.3, -0.7);
        let p0 = 2.0;
        let v1 = g1 + wd * p0;
        let p1 = p0 - lr * v1;
        let v2 = mu * v1 + g2 + wd * p1;
        let p2 = p1 - lr * v2;

        let (mut s, id) = store_with(&[p0]);
        let cfg = SgdConfig {
            lr,
            momentum: mu,
            weight_decay: wd,
        };
        s.accumulate_raw(id, &[g1], 1.0);
        s.sgd_step(&cfg).unwrap();
        s.accumulate_raw(id, &[g2], 1.0);
        s.sgd_step(&cfg).unwrap();
        assert!((s.get(id).tensor.data()[0] - p2).abs() < 1e-15);
        assert!((s.get(id).momentum.data()[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_a_state_error() {
        let (mut s, _) = store_with(&[1.0]);
        assert!(matches!(s.sgd_step(&SgdConfig::default()), Err(Error::State(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let (mut s, id) = store_with(&[0.25, 4.0]);
        s.accumulate_raw(id, &[3.0, -9.0], 1.0);
        s.sgd_step(&SgdConfig {
            lr: 0.0,
            ..SgdConfig::default()
        })
        .unwrap();
        assert_eq!(s.get(id).tensor.data(), &[0.25, 4.0]);
    }
}
