//! Two-stage adversarial inpainting: an edge generator completes the Canny edge map inside
//! the hole, a texture generator fills the hole guided by the composed edges.

use std::fmt;
use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::masks::MaskSampler;
use crate::error::{Error, Result};
use crate::imgproc::{canny, dilate_n, CannyParams};
use crate::nn::{Adam, ConvGeom, Conv2d, Graph, ParamStore, Tensor, Var};
use crate::oct::{EnFaceImage, RegionMask};
use crate::scalar::Scalar;
use crate::seeds;
use crate::training::{checkpoint, lr_at, TrainConfig, Transform};

pub const DESHADOW_KIND: &str = "deshadow";
/// Largest mask fraction `eliminate_shadows` accepts.
pub const MAX_MASK_FRACTION: f64 = 0.6;
pub const COLLAPSE_LOSS: f64 = 1e-4;
pub const COLLAPSE_STEPS: usize = 50;
/// Edges within this many pixels of the hole are dropped from the context edge map.
pub const EDGE_RING_PX: usize = 2;
const BCE_EPS: f64 = 1e-7;
/// Standardized images are `z * STD_SCALE + 0.5`, with `z` the z-score over unmasked pixels.
const STD_SCALE: f64 = 0.15;
const HOLE_FILL: f64 = 0.5;
const FEATURE_SEED: u64 = 0x5eed_f00d;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Edge,
    Inpaint,
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Edge, Stage::Inpaint, Stage::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Edge => "edge",
            Stage::Inpaint => "inpaint",
            Stage::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config("deshadow.stage", format!("unknown stage '{s}', expected edge, inpaint or joint")))
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn loss_names(self) -> Vec<&'static str> {
        const EDGE: [&str; 3] = ["loss_d1", "loss_g1_adv", "loss_g1_fm"];
        const INPAINT: [&str; 5] = ["loss_d2", "loss_g2_l1", "loss_g2_adv", "loss_g2_perceptual", "loss_g2_style"];
        match self {
            Stage::Edge => EDGE.to_vec(),
            Stage::Inpaint => INPAINT.to_vec(),
            Stage::Joint => EDGE.iter().chain(INPAINT.iter()).copied().collect(),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanWeights {
    pub edge_adversarial: f64,
    pub edge_feature_matching: f64,
    pub l1: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub style: f64,
}

impl Default for GanWeights {
    fn default() -> Self {
        Self { edge_adversarial: 1.0, edge_feature_matching: 10.0, l1: 1.0, adversarial: 0.1, perceptual: 0.1, style: 250.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeshadowConfig {
    pub generator_channels: usize,
    pub residual_blocks: usize,
    pub discriminator_channels: usize,
    /// Square training crop side; a multiple of 4, at least 32.
    pub crop: usize,
    /// Discriminator learning rate relative to the generators'.
    pub d_lr_ratio: f64,
    pub weights: GanWeights,
    pub sampler: MaskSampler,
}

impl Default for DeshadowConfig {
    fn default() -> Self {
        Self {
            generator_channels: 16,
            residual_blocks: 4,
            discriminator_channels: 16,
            crop: 64,
            d_lr_ratio: 0.1,
            weights: GanWeights::default(),
            sampler: MaskSampler::default(),
        }
    }
}

impl DeshadowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.generator_channels == 0 || self.discriminator_channels == 0 || self.residual_blocks == 0 {
            return Err(Error::config("deshadow", "channel and block counts must be positive"));
        }
        if self.crop < 32 || !self.crop.is_multiple_of(GENERATOR_MULTIPLE) {
            return Err(Error::config("deshadow.crop", format!("must be a multiple of 4 and at least 32, got {}", self.crop)));
        }
        if !(self.d_lr_ratio > 0.0 && self.d_lr_ratio.is_finite()) {
            return Err(Error::config("deshadow.d_lr_ratio", format!("must be positive, got {}", self.d_lr_ratio)));
        }
        let w = self.weights;
        for (k, v) in [
            ("edge_adversarial", w.edge_adversarial),
            ("edge_feature_matching", w.edge_feature_matching),
            ("l1", w.l1),
            ("adversarial", w.adversarial),
            ("perceptual", w.perceptual),
            ("style", w.style),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("deshadow.weights.{k}"), format!("must be finite and non-negative, got {v}")));
            }
        }
        self.sampler.validate()
    }
}

const GENERATOR_MULTIPLE: usize = 4;

/// Encoder (two stride-2 convs), dilated residual blocks, upsampling decoder, sigmoid output.
#[derive(Debug, Clone)]
struct Generator {
    stem: Conv2d,
    down: [Conv2d; 2],
    res: Vec<(Conv2d, Conv2d)>,
    up: [Conv2d; 2],
    out: Conv2d,
}

impl Generator {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, p: &str, cin: usize, c: usize, blocks: usize, rng: &mut R) -> Self {
        let down_geom = ConvGeom::strided((2, 2), (1, 1));
        let stem = Conv2d::new(store, &format!("{p}.stem"), cin, c, (5, 5), ConvGeom::same(5), rng);
        let down = [
            Conv2d::new(store, &format!("{p}.down0"), c, 2 * c, (4, 4), down_geom, rng),
            Conv2d::new(store, &format!("{p}.down1"), 2 * c, 4 * c, (4, 4), down_geom, rng),
        ];
        let res = (0..blocks)
            .map(|i| {
                let a = Conv2d::new(store, &format!("{p}.res{i}.a"), 4 * c, 4 * c, (3, 3), ConvGeom::dilated(3, 2), rng);
                let b = Conv2d::with_gain(store, &format!("{p}.res{i}.b"), 4 * c, 4 * c, (3, 3), ConvGeom::same(3), 0.5, rng);
                (a, b)
            })
            .collect();
        let up = [Conv2d::same3(store, &format!("{p}.up0"), 4 * c, 2 * c, rng), Conv2d::same3(store, &format!("{p}.up1"), 2 * c, c, rng)];
        let out = Conv2d::same3(store, &format!("{p}.out"), c, 1, rng);
        Self { stem, down, res, up, out }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let norm_relu = |g: &mut Graph<T>, y: Var| {
            let y = g.instance_norm(y);
            g.relu(y)
        };
        let mut y = self.stem.forward(g, store, x);
        y = norm_relu(g, y);
        for conv in &self.down {
            y = conv.forward(g, store, y);
            y = norm_relu(g, y);
        }
        for (a, b) in &self.res {
            let r = a.forward(g, store, y);
            let r = norm_relu(g, r);
            let r = b.forward(g, store, r);
            let r = g.instance_norm(r);
            y = g.add(y, r);
        }
        for conv in &self.up {
            y = g.upsample2(y);
            y = conv.forward(g, store, y);
            y = norm_relu(g, y);
        }
        let y = self.out.forward(g, store, y);
        g.sigmoid(y)
    }
}

/// 70x70 PatchGAN: 4x4 convs with strides 2, 2, 2, 1, 1.
#[derive(Debug, Clone)]
struct Discriminator {
    convs: Vec<Conv2d>,
}

/// Receptive field of one discriminator output, in pixels.
pub const PATCH_RECEPTIVE_FIELD: usize = 70;

impl Discriminator {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, p: &str, cin: usize, c: usize, rng: &mut R) -> Self {
        let spec = [(cin, c, 2), (c, 2 * c, 2), (2 * c, 4 * c, 2), (4 * c, 8 * c, 1), (8 * c, 1, 1)];
        let convs = spec
            .iter()
            .enumerate()
            .map(|(i, &(a, b, st))| Conv2d::new(store, &format!("{p}.conv{i}"), a, b, (4, 4), ConvGeom::strided((st, st), (1, 1)), rng))
            .collect();
        Self { convs }
    }

    /// Intermediate activations and per-patch real probabilities.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> (Vec<Var>, Var) {
        let mut feats = Vec::with_capacity(self.convs.len() - 1);
        let mut y = x;
        let (last, hidden) = self.convs.split_last().expect("five convs");
        for conv in hidden {
            y = conv.forward(g, store, y);
            y = g.leaky_relu(y, T::lit(0.2));
            feats.push(y);
        }
        let logits = last.forward(g, store, y);
        (feats, g.sigmoid(logits))
    }
}

/// Fixed random convolutional features for the perceptual and style losses.
#[derive(Debug, Clone)]
struct FeatureNet<T: Scalar> {
    convs: Vec<Conv2d>,
    store: ParamStore<T>,
}

impl<T: Scalar> FeatureNet<T> {
    fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_SEED);
        let mut store = ParamStore::new();
        let down = ConvGeom::strided((2, 2), (1, 1));
        let convs = vec![
            Conv2d::new(&mut store, "feat.conv0", 1, 8, (3, 3), ConvGeom::same(3), &mut rng),
            Conv2d::new(&mut store, "feat.conv1", 8, 16, (3, 3), down, &mut rng),
            Conv2d::new(&mut store, "feat.conv2", 16, 32, (3, 3), down, &mut rng),
        ];
        store.freeze();
        Self { convs, store }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let mut y = x;
        self.convs
            .iter()
            .map(|c| {
                y = c.forward(g, &self.store, y);
                y = g.relu(y);
                y
            })
            .collect()
    }

    fn perceptual_and_style(&self, g: &mut Graph<T>, a: Var, b: Var) -> (Var, Var) {
        let fa = self.forward(g, a);
        let fb = self.forward(g, b);
        let mut perceptual = None;
        let mut style = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let p = g.l1(x, y);
            let (gx, gy) = (g.gram(x), g.gram(y));
            let st = g.l1(gx, gy);
            perceptual = Some(perceptual.map_or(p, |acc| g.add(acc, p)));
            style = Some(style.map_or(st, |acc| g.add(acc, st)));
        }
        (perceptual.expect("three layers"), style.expect("three layers"))
    }
}

/// Aborts training when a discriminator loss stays below a floor for too many steps.
#[derive(Debug, Clone)]
pub struct CollapseGuard {
    name: &'static str,
    run: usize,
}

impl CollapseGuard {
    pub fn new(name: &'static str) -> Self {
        Self { name, run: 0 }
    }

    pub fn observe(&mut self, d_loss: f64) -> Result<()> {
        self.run = if d_loss < COLLAPSE_LOSS { self.run + 1 } else { 0 };
        if self.run >= COLLAPSE_STEPS {
            return Err(Error::Divergence(format!(
                "discriminator {} collapsed: loss below {COLLAPSE_LOSS} for {COLLAPSE_STEPS} consecutive steps",
                self.name
            )));
        }
        Ok(())
    }
}

/// Network-ready planes for one image and hole, in the standardized domain.
#[derive(Debug, Clone)]
struct Prepared<T> {
    /// Standardized image (the clean target during training).
    image: Array2<T>,
    masked: Array2<T>,
    hole: Array2<T>,
    ring: Array2<T>,
    edges_ctx: Array2<T>,
    mu: f64,
    sigma: f64,
}

fn to_float<T: Scalar>(m: &Array2<bool>) -> Array2<T> {
    m.mapv(|b| if b { T::one() } else { T::zero() })
}

fn edges<T: Scalar>(img: &Array2<T>) -> Array2<bool> {
    canny(img, CannyParams::default())
}

impl<T: Scalar> Prepared<T> {
    fn new(image: &Array2<T>, hole: &Array2<bool>) -> Self {
        let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
        for (&v, &h) in image.iter().zip(hole.iter()) {
            if !h {
                let v = v.as_f64();
                sum += v;
                sq += v * v;
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mu = sum / n;
        let sigma = (sq / n - mu * mu).max(0.0).sqrt().max(1e-3);
        let std = image.mapv(|v| T::lit((v.as_f64() - mu) / sigma * STD_SCALE + 0.5));
        let mut masked = std.clone();
        masked.zip_mut_with(hole, |v, &h| {
            if h {
                *v = T::lit(HOLE_FILL);
            }
        });
        let ring = dilate_n(hole, EDGE_RING_PX);
        let mut ctx = edges(&masked);
        ctx.zip_mut_with(&ring, |e, &r| *e &= !r);
        Self { image: std, masked, hole: to_float(hole), ring: to_float(&ring), edges_ctx: to_float(&ctx), mu, sigma }
    }

    fn unstandardize(&self, v: T) -> T {
        T::lit((self.mu + (v.as_f64() - 0.5) / STD_SCALE * self.sigma).clamp(0.0, 1.0))
    }
}

fn planes_tensor<T: Scalar>(planes: &[&Array2<T>]) -> Result<Tensor<T>> {
    let (h, w) = planes[0].dim();
    let mut data = Vec::with_capacity(planes.len() * h * w);
    for p in planes {
        if p.dim() != (h, w) {
            return Err(Error::shape(&[h, w], &[p.nrows(), p.ncols()]));
        }
        data.extend(p.iter().copied());
    }
    Tensor::from_vec([planes.len(), 1, h, w], data)
}

/// Stacked training batch.
struct Batch<T> {
    target: Tensor<T>,
    masked: Tensor<T>,
    hole: Tensor<T>,
    ring: Tensor<T>,
    edges_ctx: Tensor<T>,
    edges_gt: Tensor<T>,
    outside: Tensor<T>,
    hole_mean: f64,
}

impl<T: Scalar> Batch<T> {
    fn new(items: &[Prepared<T>]) -> Result<Self> {
        let pick = |f: fn(&Prepared<T>) -> &Array2<T>| planes_tensor(&items.iter().map(f).collect::<Vec<_>>());
        let gt: Vec<Array2<T>> = items.iter().map(|p| to_float(&edges(&p.image))).collect();
        let outside: Vec<Array2<T>> = items.iter().map(|p| &p.image * &p.hole.mapv(|h| T::one() - h)).collect();
        let hole = pick(|p| &p.hole)?;
        let hole_mean = hole.mean().as_f64().max(1e-6);
        Ok(Self {
            target: pick(|p| &p.image)?,
            masked: pick(|p| &p.masked)?,
            hole,
            ring: pick(|p| &p.ring)?,
            edges_ctx: pick(|p| &p.edges_ctx)?,
            edges_gt: planes_tensor(&gt.iter().collect::<Vec<_>>())?,
            outside: planes_tensor(&outside.iter().collect::<Vec<_>>())?,
            hole_mean,
        })
    }
}

/// Graph inputs shared by the generator passes.
struct Inputs {
    masked: Var,
    hole: Var,
    ring: Var,
    edges_ctx: Var,
}

impl Inputs {
    fn new<T: Scalar>(g: &mut Graph<T>, b: &Batch<T>) -> Self {
        Self { masked: g.input(b.masked.clone()), hole: g.input(b.hole.clone()), ring: g.input(b.ring.clone()), edges_ctx: g.input(b.edges_ctx.clone()) }
    }
}

/// Per-epoch means of the stage's loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct GanEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub components: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanReport {
    pub stage: Stage,
    pub loss_names: Vec<&'static str>,
    pub epochs: Vec<GanEpochLog>,
    pub steps: usize,
}

impl GanReport {
    pub fn csv(&self) -> String {
        let mut out = format!("epoch,lr,{}\n", self.loss_names.join(","));
        for e in &self.epochs {
            let vals: Vec<String> = e.components.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&format!("{},{},{}\n", e.epoch, e.lr, vals.join(",")));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedMeta {
    config: DeshadowConfig,
    trained: Option<Stage>,
}

/// Edge generator G1, texture generator G2 and their patch discriminators D1, D2.
#[derive(Debug, Clone)]
pub struct DeshadowModel<T: Scalar> {
    config: DeshadowConfig,
    g1: Generator,
    g2: Generator,
    d1: Discriminator,
    d2: Discriminator,
    g1_store: ParamStore<T>,
    g2_store: ParamStore<T>,
    d1_store: ParamStore<T>,
    d2_store: ParamStore<T>,
    features: FeatureNet<T>,
    trained: Option<Stage>,
}

struct Optimizers<T> {
    g1: Adam<T>,
    g2: Adam<T>,
    d1: Adam<T>,
    d2: Adam<T>,
}

fn ones_like<T: Scalar>(g: &Graph<T>, v: Var) -> Tensor<T> {
    Tensor::full(g.value(v).shape(), T::one())
}

fn sum_vars<T: Scalar>(g: &mut Graph<T>, terms: &[(Var, f64)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let t = g.scale(v, T::lit(w));
        acc = Some(acc.map_or(t, |a| g.add(a, t)));
    }
    acc.expect("at least one term")
}

impl<T: Scalar> DeshadowModel<T> {
    pub fn new(config: DeshadowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = |i| ChaCha8Rng::seed_from_u64(seeds::derive(seed, 0xde5d, i));
        let (gc, dc, rb) = (config.generator_channels, config.discriminator_channels, config.residual_blocks);
        let mut g1_store = ParamStore::new();
        let g1 = Generator::new(&mut g1_store, "g1", 3, gc, rb, &mut rng(0));
        let mut g2_store = ParamStore::new();
        let g2 = Generator::new(&mut g2_store, "g2", 3, gc, rb, &mut rng(1));
        let mut d1_store = ParamStore::new();
        let d1 = Discriminator::new(&mut d1_store, "d1", 2, dc, &mut rng(2));
        let mut d2_store = ParamStore::new();
        let d2 = Discriminator::new(&mut d2_store, "d2", 1, dc, &mut rng(3));
        Ok(Self { config, g1, g2, d1, d2, g1_store, g2_store, d1_store, d2_store, features: FeatureNet::new(), trained: None })
    }

    pub fn config(&self) -> &DeshadowConfig {
        &self.config
    }

    /// Last completed training stage.
    pub fn trained_stage(&self) -> Option<Stage> {
        self.trained
    }

    pub fn num_parameters(&self) -> usize {
        [&self.g1_store, &self.g2_store, &self.d1_store, &self.d2_store].iter().map(|s| s.num_scalars()).sum()
    }

    fn check_stage(&self, stage: Stage) -> Result<()> {
        let next = self.trained.map_or(0, |s| s.index() + 1);
        if stage.index() > next {
            let done = self.trained.map_or("none".to_string(), |s| s.to_string());
            let need = Stage::ALL[stage.index() - 1];
            return Err(Error::Precondition(format!("stage '{stage}' requires stage '{need}' first (completed: {done})")));
        }
        Ok(())
    }

    fn edge_pass(&self, g: &mut Graph<T>, inp: &Inputs) -> (Var, Var) {
        let x = g.concat(&[inp.masked, inp.edges_ctx, inp.hole]);
        let e = self.g1.forward(g, &self.g1_store, x);
        let inside = g.mul(e, inp.ring);
        let composed = g.add(inp.edges_ctx, inside);
        (e, composed)
    }

    fn texture_pass(&self, g: &mut Graph<T>, inp: &Inputs, edges: Var) -> Var {
        let x = g.concat(&[inp.masked, edges, inp.hole]);
        self.g2.forward(g, &self.g2_store, x)
    }

    fn composite(g: &mut Graph<T>, outside: Var, y: Var, hole: Var) -> Var {
        let inside = g.mul(y, hole);
        g.add(outside, inside)
    }

    fn d_loss(g: &mut Graph<T>, d: &Discriminator, store: &ParamStore<T>, real: Tensor<T>, fake: Tensor<T>) -> Var {
        let eps = T::lit(BCE_EPS);
        let r = g.input(real);
        let f = g.input(fake);
        let (_, pr) = d.forward(g, store, r);
        let (_, pf) = d.forward(g, store, f);
        let ones = ones_like(g, pr);
        let zeros = Tensor::zeros(g.value(pf).shape());
        let lr = g.bce(pr, ones, eps);
        let lf = g.bce(pf, zeros, eps);
        let sum = g.add(lr, lf);
        g.scale(sum, T::lit(0.5))
    }

    fn edge_gen_losses(&self, g: &mut Graph<T>, e: Var, b: &Batch<T>) -> (Var, Var) {
        let gray = g.input(b.target.clone());
        let real_edges = g.input(b.edges_gt.clone());
        let fake_in = g.concat(&[e, gray]);
        let real_in = g.concat(&[real_edges, gray]);
        let (ff, pf) = self.d1.forward(g, &self.d1_store, fake_in);
        let (rf, _) = self.d1.forward(g, &self.d1_store, real_in);
        let ones = ones_like(g, pf);
        let adv = g.bce(pf, ones, T::lit(BCE_EPS));
        let fm_terms: Vec<(Var, f64)> = ff.iter().zip(&rf).map(|(&a, &r)| (g.l1(a, r), 1.0)).collect();
        (adv, sum_vars(g, &fm_terms))
    }

    /// L1 (normalized by hole fraction), adversarial, perceptual and style terms.
    fn texture_gen_losses(&self, g: &mut Graph<T>, y: Var, yc: Var, b: &Batch<T>) -> [Var; 4] {
        let target = g.input(b.target.clone());
        let l1 = g.l1(y, target);
        let l1 = g.scale(l1, T::lit(1.0 / b.hole_mean));
        let (_, pf) = self.d2.forward(g, &self.d2_store, yc);
        let ones = ones_like(g, pf);
        let adv = g.bce(pf, ones, T::lit(BCE_EPS));
        let (perceptual, style) = self.features.perceptual_and_style(g, yc, target);
        [l1, adv, perceptual, style]
    }

    fn scalar(g: &Graph<T>, v: Var) -> f64 {
        g.value(v).data()[0].as_f64()
    }

    /// One discriminator update followed by one generator update. Returns the stage's loss terms.
    fn train_step(&mut self, stage: Stage, b: &Batch<T>, opt: &mut Optimizers<T>, lr: f64) -> Result<Vec<f64>> {
        let w = self.config.weights;
        let (g_lr, d_lr) = (T::lit(lr), T::lit(lr * self.config.d_lr_ratio));
        let edge = matches!(stage, Stage::Edge | Stage::Joint);
        let texture = matches!(stage, Stage::Inpaint | Stage::Joint);

        // generator outputs with current weights, detached for the discriminators
        let (fake_edges, fake_image) = {
            let mut g = Graph::new();
            let inp = Inputs::new(&mut g, b);
            let (e, composed) = self.edge_pass(&mut g, &inp);
            let edges_for_g2 = if stage == Stage::Inpaint { g.input(Self::gt_composed(b)) } else { composed };
            let img = if texture {
                let y = self.texture_pass(&mut g, &inp, edges_for_g2);
                let outside = g.input(b.outside.clone());
                let yc = Self::composite(&mut g, outside, y, inp.hole);
                Some(g.value(yc).clone())
            } else {
                None
            };
            (g.value(e).clone(), img)
        };

        let mut d_losses = Vec::new();
        if edge {
            let mut g = Graph::new();
            let real = concat_planes(&b.edges_gt, &b.target)?;
            let fake = concat_planes(&fake_edges, &b.target)?;
            let l = Self::d_loss(&mut g, &self.d1, &self.d1_store, real, fake);
            let grads = g.backward(l);
            self.d1_store.accumulate(&g, &grads);
            opt.d1.step(&mut self.d1_store, d_lr);
            d_losses.push(Self::scalar(&g, l));
        }
        if let Some(fake) = fake_image {
            let mut g = Graph::new();
            let l = Self::d_loss(&mut g, &self.d2, &self.d2_store, b.target.clone(), fake);
            let grads = g.backward(l);
            self.d2_store.accumulate(&g, &grads);
            opt.d2.step(&mut self.d2_store, d_lr);
            d_losses.push(Self::scalar(&g, l));
        }

        self.d1_store.freeze();
        self.d2_store.freeze();
        if stage == Stage::Inpaint {
            self.g1_store.freeze();
        }
        let mut g = Graph::new();
        let inp = Inputs::new(&mut g, b);
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let mut values = Vec::new();
        let (e, composed) = self.edge_pass(&mut g, &inp);
        if edge {
            let (adv, fm) = self.edge_gen_losses(&mut g, e, b);
            terms.extend([(adv, w.edge_adversarial), (fm, w.edge_feature_matching)]);
            values.extend([d_losses[0], Self::scalar(&g, adv), Self::scalar(&g, fm)]);
        }
        if texture {
            let edges_for_g2 = if stage == Stage::Inpaint { g.input(Self::gt_composed(b)) } else { composed };
            let y = self.texture_pass(&mut g, &inp, edges_for_g2);
            let outside = g.input(b.outside.clone());
            let yc = Self::composite(&mut g, outside, y, inp.hole);
            let [l1, adv, perc, style] = self.texture_gen_losses(&mut g, y, yc, b);
            terms.extend([(l1, w.l1), (adv, w.adversarial), (perc, w.perceptual), (style, w.style)]);
            values.extend([*d_losses.last().expect("d2 loss"), Self::scalar(&g, l1), Self::scalar(&g, adv), Self::scalar(&g, perc), Self::scalar(&g, style)]);
        }
        let total = sum_vars(&mut g, &terms);
        let names = stage.loss_names();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            self.unfreeze_all();
            return Err(Error::Divergence(format!("deshadow {stage} stage: {} is not finite", names[i])));
        }
        let grads = g.backward(total);
        if edge {
            self.g1_store.accumulate(&g, &grads);
        }
        if texture {
            self.g2_store.accumulate(&g, &grads);
        }
        self.unfreeze_all();
        if edge {
            opt.g1.step(&mut self.g1_store, g_lr);
        }
        if texture {
            opt.g2.step(&mut self.g2_store, g_lr);
        }
        Ok(values)
    }

    fn unfreeze_all(&mut self) {
        self.g1_store.unfreeze();
        self.d1_store.unfreeze();
        self.d2_store.unfreeze();
    }

    /// Context edges plus ground-truth edges inside the ring.
    fn gt_composed(b: &Batch<T>) -> Tensor<T> {
        let mut t = b.edges_ctx.clone();
        for ((v, &gt), &r) in t.data_mut().iter_mut().zip(b.edges_gt.data()).zip(b.ring.data()) {
            *v += gt * r;
        }
        t
    }

    fn sample_crop<R: Rng>(&self, tex: &Array2<T>, train: &TrainConfig, rng: &mut R) -> Result<Prepared<T>> {
        let c = self.config.crop;
        let (h, w) = tex.dim();
        let (y0, x0) = (rng.random_range(0..=h - c), rng.random_range(0..=w - c));
        let crop = tex.slice(s![y0..y0 + c, x0..x0 + c]).to_owned();
        let crop = Transform::draw(&train.augmentation, rng).apply_image(&crop);
        let hole = self.config.sampler.sample((c, c), rng)?;
        Ok(Prepared::new(&crop, hole.mask()))
    }

    /// Trains one stage on clean textures with sampled vessel-shaped holes.
    /// One epoch draws one random crop and hole per texture.
    pub fn train_stage(&mut self, stage: Stage, textures: &[Array2<T>], train: &TrainConfig) -> Result<GanReport> {
        self.check_stage(stage)?;
        train.validate()?;
        let c = self.config.crop;
        if textures.is_empty() {
            return Err(Error::Data("deshadow training needs at least one texture".into()));
        }
        if let Some(t) = textures.iter().find(|t| t.nrows() < c || t.ncols() < c) {
            return Err(Error::Data(format!("texture {:?} is smaller than the {c}x{c} crop", t.dim())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(train.seed, 0x00de_5d7a, stage.index() as u64));
        let (b1, b2) = (train.optimizer.beta1, train.optimizer.beta2);
        let mut opt = Optimizers { g1: Adam::new(b1, b2), g2: Adam::new(b1, b2), d1: Adam::new(b1, b2), d2: Adam::new(b1, b2) };
        let mut guards = [CollapseGuard::new("D1"), CollapseGuard::new("D2")];
        let names = stage.loss_names();
        let mut report = GanReport { stage, loss_names: names.clone(), epochs: Vec::new(), steps: 0 };
        let mut order: Vec<usize> = (0..textures.len()).collect();
        for epoch in 0..train.max_epochs {
            let lr = lr_at(train, epoch);
            order.shuffle(&mut rng);
            let mut sums = vec![0.0; names.len()];
            let mut batches = 0;
            for chunk in order.chunks(train.batch_size) {
                let items = chunk.iter().map(|&i| self.sample_crop(&textures[i], train, &mut rng)).collect::<Result<Vec<_>>>()?;
                let batch = Batch::new(&items)?;
                let vals = self.train_step(stage, &batch, &mut opt, lr)?;
                let d_idx: Vec<usize> = names.iter().enumerate().filter(|(_, n)| n.starts_with("loss_d")).map(|(i, _)| i).collect();
                for &i in &d_idx {
                    let guard = if names[i] == "loss_d1" { &mut guards[0] } else { &mut guards[1] };
                    guard.observe(vals[i])?;
                }
                sums.iter_mut().zip(&vals).for_each(|(s, v)| *s += v);
                batches += 1;
                report.steps += 1;
            }
            let components = sums.iter().map(|s| s / batches as f64).collect();
            log::info!("deshadow {stage} epoch {epoch}: {components:?}");
            report.epochs.push(GanEpochLog { epoch, lr, components });
        }
        self.trained = Some(self.trained.map_or(stage, |t| t.max(stage)));
        if let Some(dir) = &train.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            self.save(&dir.join(format!("deshadow_{stage}.ckpt")), train.max_epochs)?;
            let log = dir.join(format!("deshadow_{stage}_log.csv"));
            std::fs::write(&log, report.csv()).map_err(|e| Error::io(&log, e))?;
        }
        Ok(report)
    }

    /// Generator fill for the whole image (back in the input's intensity scale), plus
    /// the composed edge map. Sizes are edge-padded to a multiple of 4.
    pub fn inpaint(&self, image: &Array2<T>, hole: &Array2<bool>) -> Result<(Array2<T>, Array2<T>)> {
        if image.dim() != hole.dim() {
            return Err(Error::shape(&[image.nrows(), image.ncols()], &[hole.nrows(), hole.ncols()]));
        }
        let (h, w) = image.dim();
        if h == 0 || w == 0 {
            return Err(Error::Data("cannot inpaint an empty image".into()));
        }
        let m = GENERATOR_MULTIPLE;
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let img = Array2::from_shape_fn((ph, pw), |(r, c)| image[[r.min(h - 1), c.min(w - 1)]]);
        let hl = Array2::from_shape_fn((ph, pw), |(r, c)| r < h && c < w && hole[[r, c]]);
        let prep = Prepared::new(&img, &hl);
        let batch = Batch::new(std::slice::from_ref(&prep))?;
        let mut g = Graph::new();
        let inp = Inputs::new(&mut g, &batch);
        let (_, composed) = self.edge_pass(&mut g, &inp);
        let y = self.texture_pass(&mut g, &inp, composed);
        let plane = |v: Var, f: &dyn Fn(T) -> T| {
            let full = Array2::from_shape_vec((ph, pw), g.value(v).data().iter().map(|&x| f(x)).collect()).expect("plane");
            full.slice(s![..h, ..w]).to_owned()
        };
        Ok((plane(y, &|v| prep.unstandardize(v)), plane(composed, &|v| v)))
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        let meta = SavedMeta { config: self.config, trained: self.trained };
        let cfg = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        checkpoint::save(path, DESHADOW_KIND, epoch, cfg, &[&self.g1_store, &self.g2_store, &self.d1_store, &self.d2_store])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load::<T>(path)?;
        let meta: SavedMeta = serde_json::from_value(ck.meta.config.clone()).map_err(|e| Error::Checkpoint(format!("deshadow config: {e}")))?;
        let mut m = Self::new(meta.config, 0)?;
        ck.restore(DESHADOW_KIND, &mut [&mut m.g1_store, &mut m.g2_store, &mut m.d1_store, &mut m.d2_store])?;
        m.trained = meta.trained;
        Ok(m)
    }
}

fn concat_planes<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = a.shape();
    if b.shape() != [n, c, h, w] || c != 1 {
        return Err(Error::shape(&a.shape(), &b.shape()));
    }
    let mut out = Tensor::zeros([n, 2, h, w]);
    for i in 0..n {
        out.plane_mut(i, 0).copy_from_slice(a.plane(i, 0));
        out.plane_mut(i, 1).copy_from_slice(b.plane(i, 0));
    }
    Ok(out)
}

/// Runs the edge, inpaint and joint stages in order with the same schedule.
pub fn train_deshadow<T: Scalar>(textures: &[Array2<T>], config: DeshadowConfig, train: &TrainConfig) -> Result<(DeshadowModel<T>, Vec<GanReport>)> {
    let mut model = DeshadowModel::new(config, train.seed)?;
    let reports = Stage::ALL.iter().map(|&s| model.train_stage(s, textures, train)).collect::<Result<Vec<_>>>()?;
    Ok((model, reports))
}

/// Replaces the pixels under `mask` with generated content; every other pixel is copied unchanged.
pub fn eliminate_shadows<T: Scalar>(choroid: &EnFaceImage<T>, mask: &RegionMask, model: &DeshadowModel<T>) -> Result<EnFaceImage<T>> {
    if choroid.dim() != mask.dim() {
        let (a, b) = (choroid.dim(), mask.dim());
        return Err(Error::shape(&[a.0, a.1], &[b.0, b.1]));
    }
    if mask.is_empty() {
        return Ok(choroid.clone());
    }
    let fraction = mask.count() as f64 / (mask.dim().0 * mask.dim().1) as f64;
    if fraction > MAX_MASK_FRACTION {
        return Err(Error::Data(format!(
            "shadow mask covers {:.1}% of the image; inpainting is limited to {:.0}%",
            100.0 * fraction,
            100.0 * MAX_MASK_FRACTION
        )));
    }
    if model.trained_stage().is_none_or(|s| s < Stage::Inpaint) {
        return Err(Error::Precondition("deshadow model has not completed the inpaint stage".into()));
    }
    let (fill, _) = model.inpaint(choroid.pixels(), mask.mask())?;
    let mut out = choroid.pixels().clone();
    for ((o, &f), &m) in out.iter_mut().zip(fill.iter()).zip(mask.mask().iter()) {
        if m {
            *o = f;
        }
    }
    EnFaceImage::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_discriminator_sees_seventy_pixels() {
        let mut store = ParamStore::<f64>::new();
        let d = Discriminator::new(&mut store, "d", 1, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let n = 128;
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn([1, 1, n, n], |[_, _, r, c]| ((r * 31 + c * 17) % 13) as f64 / 13.0));
        let (_, p) = d.forward(&mut g, &store, x);
        let [_, _, oh, ow] = g.value(p).shape();
        assert_eq!((oh, ow), (14, 14));
        // gradient of one central patch output with respect to the input
        let sel = g.input(Tensor::from_fn([1, 1, oh, ow], |[_, _, r, c]| if r == 7 && c == 7 { 1.0 } else { 0.0 }));
        let picked = g.mul(p, sel);
        let out = g.mean_all(picked);
        let grads = g.backward(out);
        let gx = grads.get(x).unwrap();
        let hit: Vec<(usize, usize)> = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).filter(|&(r, c)| gx.at([0, 0, r, c]) != 0.0).collect();
        let rows = hit.iter().map(|h| h.0).max().unwrap() - hit.iter().map(|h| h.0).min().unwrap() + 1;
        let cols = hit.iter().map(|h| h.1).max().unwrap() - hit.iter().map(|h| h.1).min().unwrap() + 1;
        assert_eq!((rows, cols), (PATCH_RECEPTIVE_FIELD, PATCH_RECEPTIVE_FIELD));
    }

    #[test]
    fn standardization_round_trips() {
        let img = Array2::from_shape_fn((8, 8), |(r, c)| 0.2 + 0.05 * ((r + c) % 5) as f64);
        let hole = Array2::from_shape_fn((8, 8), |(r, _)| r == 3);
        let p = Prepared::new(&img, &hole);
        for (&s, &v) in p.image.iter().zip(img.iter()) {
            assert!((p.unstandardize(s) - v).abs() < 1e-12);
        }
        assert!(p.masked.row(3).iter().all(|&v| v == HOLE_FILL));
        assert!(p.edges_ctx.row(3).iter().all(|&v| v == 0.0));
    }
}
