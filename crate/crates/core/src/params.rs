use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid("params", format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid("params", format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), graph.param(v.clone())))
                .collect(),
        }
    }
}

/// Parameter name to tape node for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("params", format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradient for every bound parameter; zeros where the loss did not reach it.
    pub fn collect<T: Scalar>(
        &self,
        graph: &Graph<T>,
        grads: &Gradients<T>,
    ) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }
}

/// He-normal convolution kernel `[cout, cin, k, k]`.
pub fn conv_kernel<T: Scalar, R: Rng + ?Sized>(cout: usize, cin: usize, k: usize, rng: &mut R) -> Tensor<T> {
    let fan_in = (cin * k * k) as f64;
    Tensor::randn(&[cout, cin, k, k], (2.0 / fan_in).sqrt(), rng)
}

/// Glorot-normal weight `[dout, din]`.
pub fn dense_weight<T: Scalar, R: Rng + ?Sized>(dout: usize, din: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(&[dout, din], (2.0 / (din + dout) as f64).sqrt(), rng)
}

/// Per-channel identity kernel `[c, c, k, k]` (a single 1 at each centre).
pub fn identity_kernel<T: Scalar>(c: usize, k: usize) -> Tensor<T> {
    let centre = k / 2;
    let mut t = Tensor::zeros(&[c, c, k, k]);
    for i in 0..c {
        t.data_mut()[((i * c + i) * k + centre) * k + centre] = T::one();
    }
    t
}
