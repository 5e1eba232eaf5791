use rand::Rng;

use super::conv::ConvGeom;
use super::graph::{Graph, Var};
use super::params::{he_normal, ParamId, ParamStore};
use super::Tensor;
use crate::scalar::Scalar;

/// Convolution layer whose weights live in a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        geom: ConvGeom,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(store, name, cin, cout, kernel, geom, 1.0, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        geom: ConvGeom,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), he_normal([cout, cin, kernel.0, kernel.1], gain, rng));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1])));
        Self { weight, bias, geom }
    }

    /// 3x3, stride 1, zero padding 1.
    pub fn same3<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, (3, 3), ConvGeom::same(3), rng)
    }

    pub fn pointwise<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, (1, 1), ConvGeom::same(1), rng)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.geom)
    }
}
