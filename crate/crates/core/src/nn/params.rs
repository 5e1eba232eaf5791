use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Gradients, Graph};
use super::Tensor;
use crate::scalar::Scalar;

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors of one model plus their accumulated gradients.
#[derive(Debug)]
pub struct ParamStore<T> {
    tag: u64,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    frozen: bool,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            grads: self.grads.clone(),
            frozen: self.frozen,
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            frozen: false,
        }
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name.into());
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds the gradients of this store's parameters recorded on `graph`.
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (id, g) in graph.param_grads(grads, self.tag) {
            self.grads[id.0].add_assign(g);
        }
    }

    pub fn grads_all_zero(&self) -> bool {
        self.grads.iter().all(|g| g.data().iter().all(|&v| v == T::zero()))
    }

    /// Copies values from a store with identical layout.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> crate::Result<()> {
        if other.names != self.names {
            return Err(crate::Error::Checkpoint("parameter layout differs".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(crate::Error::shape(&dst.shape(), &src.shape()));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub(crate) fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub(crate) fn names(&self) -> &[String] {
        &self.names
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }
}

/// He-normal initialization for a conv weight `(cout, cin, kh, kw)`, scaled by `gain`.
pub fn he_normal<T: Scalar, R: Rng>(shape: [usize; 4], gain: f64, rng: &mut R) -> Tensor<T> {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1) as f64;
    let std = gain * (2.0 / fan_in).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

/// Normal initialization with a fixed standard deviation.
pub fn normal<T: Scalar, R: Rng>(shape: [usize; 4], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}
