//! Tape-based reverse-mode differentiation over [`Tensor`]s.

use super::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param { store: u64, id: ParamId },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2(Var),
    Concat(Vec<Var>),
    MeanHeight(Var),
    MeanSpatial(Var),
    MeanAll(Var),
    SoftmaxChannels(Var),
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Gram(Var),
    CategoricalCe { p: Var, target: Tensor<T>, eps: T },
    Bce { p: Var, target: Tensor<T>, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of a scalar output with respect to every recorded value that requires one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (used for input-gradient checks).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf; frozen parameters never receive gradients.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let rg = !store.is_frozen();
        self.push(p.clone(), Op::Param { store: store.tag(), id }, rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv { x, w, b, geom }, rg)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
    pub fn max_pool2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for s in 0..n {
            for ch in 0..c {
                let plane = x.plane(s, ch);
                let dst = out.plane_mut(s, ch);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = (2 * oy) * w + 2 * ox;
                        for cand in [best + 1, best + w, best + w + 1] {
                            if plane[cand] > plane[best] {
                                best = cand;
                            }
                        }
                        dst[oy * ow + ox] = plane[best];
                        argmax.push(best as u32);
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::MaxPool2 { x: a, argmax }, rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for s in 0..n {
            for ch in 0..c {
                let src = x.plane(s, ch);
                let dst = out.plane_mut(s, ch);
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Upsample2(a), rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let shapes: Vec<[usize; 4]> = parts.iter().map(|&p| self.value(p).shape()).collect();
        let [n, _, h, w] = shapes[0];
        for s in &shapes {
            assert!(s[0] == n && s[2] == h && s[3] == w, "concat shape mismatch {shapes:?}");
        }
        let ctot: usize = shapes.iter().map(|s| s[1]).sum();
        let mut data = Vec::with_capacity(n * ctot * h * w);
        for s in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).sample(s));
            }
        }
        let out = Tensor::from_vec([n, ctot, h, w], data).expect("concat size");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    /// Mean over the height axis: `(n, c, h, w) -> (n, c, 1, w)`.
    pub fn mean_height(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let inv = T::one() / T::from_usize_lossy(h);
        let mut out = Tensor::zeros([n, c, 1, w]);
        for s in 0..n {
            for ch in 0..c {
                let src = x.plane(s, ch);
                let dst = out.plane_mut(s, ch);
                for row in src.chunks(w) {
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                dst.iter_mut().for_each(|d| *d *= inv);
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::MeanHeight(a), rg)
    }

    /// Mean over both spatial axes: `(n, c, h, w) -> (n, c, 1, 1)`.
    pub fn mean_spatial(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, _, _] = x.shape();
        let out = Tensor::from_fn([n, c, 1, 1], |[s, ch, _, _]| {
            let p = x.plane(s, ch);
            p.iter().copied().sum::<T>() / T::from_usize_lossy(p.len())
        });
        let rg = self.rg(a);
        self.push(out, Op::MeanSpatial(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(out, Op::MeanAll(a), rg)
    }

    pub fn softmax_channels(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let mut out = Tensor::zeros(x.shape());
        for s in 0..n {
            let src = x.sample(s);
            let dst = out.sample_mut(s);
            for i in 0..hw {
                let mut m = T::neg_infinity();
                for ch in 0..c {
                    m = m.max(src[ch * hw + i]);
                }
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (src[ch * hw + i] - m).exp();
                    dst[ch * hw + i] = e;
                    z += e;
                }
                for ch in 0..c {
                    dst[ch * hw + i] /= z;
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxChannels(a), rg)
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, _, _] = x.shape();
        let eps = T::lit(1e-5);
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(n * c);
        for s in 0..n {
            for ch in 0..c {
                let src = x.plane(s, ch);
                let len = T::from_usize_lossy(src.len());
                let mean = src.iter().copied().sum::<T>() / len;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / len;
                let is = T::one() / (var + eps).sqrt();
                inv_std.push(is);
                for (d, &v) in out.plane_mut(s, ch).iter_mut().zip(src) {
                    *d = (v - mean) * is;
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::InstanceNorm { x: a, inv_std }, rg)
    }

    /// Channel Gram matrix per sample, normalized by `c*h*w`: `(n, c, h, w) -> (n, 1, c, c)`.
    pub fn gram(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let p = h * w;
        let norm = T::one() / T::from_usize_lossy(c * p);
        let mut out = Tensor::zeros([n, 1, c, c]);
        for s in 0..n {
            let f = x.sample(s);
            T::gemm(c, p, c, norm, f, p as isize, 1, f, 1, p as isize, T::zero(), out.sample_mut(s), c as isize, 1);
        }
        let rg = self.rg(a);
        self.push(out, Op::Gram(a), rg)
    }

    /// Mean over pixels of `-sum_c target_c * ln(max(p_c, eps))`.
    pub fn categorical_ce(&mut self, p: Var, target: Tensor<T>, eps: T) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.shape(), target.shape(), "cross-entropy shape mismatch");
        let [n, _, h, w] = pv.shape();
        let pixels = T::from_usize_lossy(n * h * w);
        let total: T = pv
            .data()
            .iter()
            .zip(target.data())
            .filter(|(_, &g)| g != T::zero())
            .map(|(&q, &g)| -g * q.max(eps).ln())
            .sum();
        let out = Tensor::scalar(total / pixels);
        let rg = self.rg(p);
        self.push(out, Op::CategoricalCe { p, target, eps }, rg)
    }

    /// Mean binary cross-entropy with probabilities clipped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: Tensor<T>, eps: T) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.shape(), target.shape(), "binary cross-entropy shape mismatch");
        let m = T::from_usize_lossy(pv.len());
        let total: T = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&q, &y)| -(y * q.max(eps).ln() + (T::one() - y) * (T::one() - q).max(eps).ln()))
            .sum();
        let out = Tensor::scalar(total / m);
        let rg = self.rg(p);
        self.push(out, Op::Bce { p, target, eps }, rg)
    }

    /// Mean absolute difference, a convenience composite.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean_all(d)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), T::one()));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            // only leaves keep their gradient; intermediates are released as the sweep passes
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param { .. }) {
                grads[i] = Some(gy);
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads[v.0] = Some(g),
        }
    }

    fn propagate(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Conv { x, w, b, geom } => {
                let cg = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gy,
                    geom,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let g = zip_map(gy, self.value(*b), |g, v| g * v);
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = zip_map(gy, self.value(*a), |g, v| g * v);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gy.map(|g| g * *s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, gy.clone()),
            Op::Relu(a) => {
                let g = zip_map(gy, self.value(*a), |g, x| if x > T::zero() { g } else { T::zero() });
                self.accumulate(grads, *a, g);
            }
            Op::LeakyRelu(a, slope) => {
                let g = zip_map(gy, self.value(*a), |g, x| if x > T::zero() { g } else { g * *slope });
                self.accumulate(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = zip_map(gy, y, |g, s| g * s * (T::one() - s));
                self.accumulate(grads, *a, g);
            }
            Op::Tanh(a) => {
                let g = zip_map(gy, y, |g, t| g * (T::one() - t * t));
                self.accumulate(grads, *a, g);
            }
            Op::Abs(a) => {
                let g = zip_map(gy, self.value(*a), |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, g);
            }
            Op::MaxPool2 { x, argmax } => {
                let xs = self.value(*x).shape();
                let [n, c, _, _] = xs;
                let mut g = Tensor::zeros(xs);
                let per = gy.shape()[2] * gy.shape()[3];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * per;
                        let src = gy.plane(s, ch);
                        let dst = g.plane_mut(s, ch);
                        for (j, &v) in src.iter().enumerate() {
                            dst[argmax[base + j] as usize] += v;
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Upsample2(a) => {
                let xs = self.value(*a).shape();
                let [n, c, h, w] = xs;
                let mut g = Tensor::zeros(xs);
                for s in 0..n {
                    for ch in 0..c {
                        let src = gy.plane(s, ch);
                        let dst = g.plane_mut(s, ch);
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::Concat(parts) => {
                let n = gy.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let ps = self.value(p).shape();
                    let chw = ps[1] * ps[2] * ps[3];
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(n * chw);
                        for s in 0..n {
                            data.extend_from_slice(&gy.sample(s)[offset..offset + chw]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(ps, data).expect("concat grad"));
                    }
                    offset += chw;
                }
            }
            Op::MeanHeight(a) => {
                let xs = self.value(*a).shape();
                let [n, c, h, w] = xs;
                let inv = T::one() / T::from_usize_lossy(h);
                let mut g = Tensor::zeros(xs);
                for s in 0..n {
                    for ch in 0..c {
                        let src = gy.plane(s, ch);
                        for row in g.plane_mut(s, ch).chunks_mut(w) {
                            for (d, &v) in row.iter_mut().zip(src) {
                                *d = v * inv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::MeanSpatial(a) => {
                let xs = self.value(*a).shape();
                let inv = T::one() / T::from_usize_lossy(xs[2] * xs[3]);
                let g = Tensor::from_fn(xs, |[s, ch, _, _]| gy.at([s, ch, 0, 0]) * inv);
                self.accumulate(grads, *a, g);
            }
            Op::MeanAll(a) => {
                let xs = self.value(*a).shape();
                let inv = T::one() / T::from_usize_lossy(xs.iter().product());
                self.accumulate(grads, *a, Tensor::full(xs, gy.data()[0] * inv));
            }
            Op::SoftmaxChannels(a) => {
                let [n, c, h, w] = y.shape();
                let hw = h * w;
                let mut g = Tensor::zeros(y.shape());
                for s in 0..n {
                    let ys = y.sample(s);
                    let gs = gy.sample(s);
                    let dst = g.sample_mut(s);
                    for i in 0..hw {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            dot += gs[ch * hw + i] * ys[ch * hw + i];
                        }
                        for ch in 0..c {
                            dst[ch * hw + i] = ys[ch * hw + i] * (gs[ch * hw + i] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::InstanceNorm { x, inv_std } => {
                let [n, c, _, _] = y.shape();
                let mut g = Tensor::zeros(y.shape());
                for s in 0..n {
                    for ch in 0..c {
                        let ys = y.plane(s, ch);
                        let gs = gy.plane(s, ch);
                        let len = T::from_usize_lossy(ys.len());
                        let mean_g = gs.iter().copied().sum::<T>() / len;
                        let mean_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / len;
                        let is = inv_std[s * c + ch];
                        for ((d, &gv), &yv) in g.plane_mut(s, ch).iter_mut().zip(gs).zip(ys) {
                            *d = is * (gv - mean_g - yv * mean_gy);
                        }
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Gram(a) => {
                let x = self.value(*a);
                let [n, c, h, w] = x.shape();
                let p = h * w;
                let norm = T::one() / T::from_usize_lossy(c * p);
                let mut g = Tensor::zeros(x.shape());
                for s in 0..n {
                    let dg = gy.sample(s);
                    let mut sym = vec![T::zero(); c * c];
                    for r in 0..c {
                        for q in 0..c {
                            sym[r * c + q] = dg[r * c + q] + dg[q * c + r];
                        }
                    }
                    T::gemm(c, c, p, norm, &sym, c as isize, 1, x.sample(s), p as isize, 1, T::zero(), g.sample_mut(s), p as isize, 1);
                }
                self.accumulate(grads, *a, g);
            }
            Op::CategoricalCe { p, target, eps } => {
                let pv = self.value(*p);
                let [n, _, h, w] = pv.shape();
                let scale = gy.data()[0] / T::from_usize_lossy(n * h * w);
                let g = zip_map(pv, target, |q, t| if t != T::zero() && q > *eps { -t * scale / q } else { T::zero() });
                self.accumulate(grads, *p, g);
            }
            Op::Bce { p, target, eps } => {
                let pv = self.value(*p);
                let scale = gy.data()[0] / T::from_usize_lossy(pv.len());
                let one = T::one();
                let g = zip_map(pv, target, |q, t| {
                    let mut d = T::zero();
                    if q > *eps {
                        d -= t / q;
                    }
                    if one - q > *eps {
                        d += (one - t) / (one - q);
                    }
                    d * scale
                });
                self.accumulate(grads, *p, g);
            }
        }
    }

    /// Parameter leaves recorded from the store with the given tag.
    pub(crate) fn param_grads<'a>(&'a self, grads: &'a Gradients<T>, store: u64) -> impl Iterator<Item = (ParamId, &'a Tensor<T>)> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, node)| match node.op {
            Op::Param { store: s, id } if s == store => grads.grads[i].as_ref().map(|g| (id, g)),
            _ => None,
        })
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}
