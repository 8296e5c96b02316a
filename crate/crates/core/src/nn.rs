//! Parameter containers shared by the view encoders and the fusion MLPs.
//!
//! Parameter structs are generic over their leaf type: `Tensor<T>` for stored
//! weights, [`Var`] once they have been bound to a [`Tape`], and again
//! `Tensor<T>` for gradients or optimizer moments. `map` rebuilds the same
//! structure with new leaves and `visit` walks leaves in a fixed order under
//! dotted names.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numerics::{Scalar, Tape, Tensor, Var};

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Leaf callback used by `map`.
pub type MapFn<'a, P, Q> = dyn FnMut(&str, &P) -> Q + 'a;

/// Affine map `x · weight + bias` with `weight` stored as `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> Linear<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut MapFn<'_, P, Q>) -> Linear<Q> {
        Linear {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut P)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Scalar> Linear<Tensor<T>> {
    /// He-normal weights, zero bias.
    pub fn he<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: he_normal([fan_in, fan_out], fan_in, rng),
            bias: Tensor::zeros([fan_out]),
        }
    }

    /// All-zero weights and bias.
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros([fan_in, fan_out]),
            bias: Tensor::zeros([fan_out]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Linear<Var> {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

pub fn he_normal<T: Scalar, R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    gaussian(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

pub fn gaussian<T: Scalar, R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

/// Binds a stored tensor to the tape as a trainable leaf.
pub fn bind<T: Scalar>(tape: &mut Tape<T>) -> impl FnMut(&str, &Tensor<T>) -> Var + '_ {
    move |_, t| tape.param(t.clone())
}
