//! Named trainable parameters.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered store of named parameter tensors, each carrying a gradient buffer.
#[derive(Clone, Debug, Default)]
pub struct Params<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl ToString, tensor: Tensor<S>) -> ParamId {
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds `scale * g` for every parameter gradient recorded in `grads`.
    pub fn accumulate(&mut self, grads: &Gradients<S>, scale: S) {
        for (id, g) in grads.params() {
            if scale == S::one() {
                self.tensors[id.0].accumulate_grad(g);
            } else {
                let scaled: Vec<S> = g.iter().map(|&v| v * scale).collect();
                self.tensors[id.0].accumulate_grad(&scaled);
            }
        }
    }

    /// Replaces the value of a parameter, keeping its gradient buffer.
    pub fn set_value(&mut self, id: ParamId, data: &[S]) {
        self.tensors[id.0].data_mut().copy_from_slice(data);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// First parameter containing a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors.iter().position(|t| !t.is_finite()).map(|i| self.names[i].as_str())
    }

    /// Converts every parameter to another precision, preserving names and order.
    pub fn cast<T: Scalar>(&self) -> Params<T> {
        let mut out = Params::new();
        for (name, t) in self.iter() {
            out.add(name, t.cast());
        }
        out
    }
}

/// He-normal initialisation with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<S> {
    normal(rng, shape, libm::sqrt(2.0 / fan_in.max(1) as f64))
}

pub fn normal<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| S::from_f64(dist.sample(rng)))
}
