//! Residual regressor from a choroid mask to per-column thickness.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::bio_regression_loss;
use crate::error::{Error, Result};
use crate::nn::{Adam, Conv2d, ConvGeom, Graph, ParamStore, Tensor, Var};
use crate::oct::{column_thickness_px, RegionMask};
use crate::scalar::Scalar;
use crate::training::{checkpoint, train, Augment, Evaluation, LossReport, TrainConfig, TrainReport, Trainable, Transform};

pub const BIOMARKER_KIND: &str = "biomarker";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiomarkerConfig {
    /// Channels of the first stage; each later stage doubles them.
    pub base_channels: usize,
}

impl Default for BiomarkerConfig {
    fn default() -> Self {
        Self { base_channels: 8 }
    }
}

#[derive(Debug, Clone, Copy)]
struct BasicBlock {
    a: Conv2d,
    b: Conv2d,
    down: Option<Conv2d>,
}

impl BasicBlock {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, stride: bool, rng: &mut R) -> Self {
        let geom = if stride { ConvGeom::strided((2, 1), (1, 1)) } else { ConvGeom::same(3) };
        let a = Conv2d::new(store, &format!("{name}.a"), cin, cout, (3, 3), geom, rng);
        let b = Conv2d::with_gain(store, &format!("{name}.b"), cout, cout, (3, 3), ConvGeom::same(3), 0.5, rng);
        let down = (stride || cin != cout)
            .then(|| Conv2d::new(store, &format!("{name}.down"), cin, cout, (1, 1), ConvGeom::strided((if stride { 2 } else { 1 }, 1), (0, 0)), rng));
        Self { a, b, down }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let y = self.a.forward(g, store, x);
        let y = g.relu(y);
        let y = self.b.forward(g, store, y);
        let skip = match &self.down {
            Some(d) => d.forward(g, store, x),
            None => x,
        };
        let s = g.add(y, skip);
        g.relu(s)
    }
}

/// Stem, four stages of two basic blocks and a 1x1 head: 18 weighted layers.
/// Strides act on depth only, so every A-line keeps its own output. There is no
/// normalization layer: per-image statistics would make the output depend on the
/// band's own extent instead of summing it. A learnable 1x1 shortcut from the input
/// (initialized to identity) adds the column sum of the mask to the residual output.
#[derive(Debug, Clone)]
pub struct BiomarkerNet<T: Scalar> {
    config: BiomarkerConfig,
    store: ParamStore<T>,
    stem: Conv2d,
    blocks: Vec<BasicBlock>,
    head: Conv2d,
    shortcut: Conv2d,
}

impl<T: Scalar> BiomarkerNet<T> {
    pub fn new(config: BiomarkerConfig, seed: u64) -> Result<Self> {
        if config.base_channels == 0 {
            return Err(Error::config("biomarker.base_channels", "must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.base_channels;
        let stem = Conv2d::new(&mut store, "bio.stem", 1, c, (3, 3), ConvGeom::strided((2, 1), (1, 1)), &mut rng);
        let mut blocks = Vec::with_capacity(8);
        let mut cin = c;
        for stage in 0..4 {
            let cout = c << stage;
            for k in 0..2 {
                let stride = stage > 0 && k == 0;
                blocks.push(BasicBlock::new(&mut store, &format!("bio.s{stage}.b{k}"), cin, cout, stride, &mut rng));
                cin = cout;
            }
        }
        // Near-zero head: the output is scaled by the image height.
        let head = Conv2d::with_gain(&mut store, "bio.head", cin, 1, (1, 1), ConvGeom::same(1), 0.01, &mut rng);
        let shortcut = Conv2d::pointwise(&mut store, "bio.shortcut", 1, 1, &mut rng);
        store.get_mut(shortcut.weight).data_mut()[0] = T::one();
        Ok(Self { config, store, stem, blocks, head, shortcut })
    }

    pub fn config(&self) -> BiomarkerConfig {
        self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    /// Per-column thickness in pixels, `(n, 1, 1, w)`, for a mask input `(n, 1, h, w)`.
    pub fn forward_columns(&self, g: &mut Graph<T>, mask: Var) -> Var {
        let h = g.value(mask).shape()[2];
        let mut y = self.stem.forward(g, &self.store, mask);
        y = g.relu(y);
        for b in &self.blocks {
            y = b.forward(g, &self.store, y);
        }
        let y = self.head.forward(g, &self.store, y);
        let y = g.mean_height(y);
        let direct = self.shortcut.forward(g, &self.store, mask);
        let direct = g.mean_height(direct);
        let y = g.add(y, direct);
        g.scale(y, T::from_usize_lossy(h))
    }

    /// Returns `(per-column thickness, B_pred)` where `B_pred` is `(n, 1, 1, 1)`.
    pub fn forward(&self, g: &mut Graph<T>, mask: Var) -> (Var, Var) {
        let cols = self.forward_columns(g, mask);
        let mean = g.mean_spatial(cols);
        (cols, mean)
    }

    /// Inference on one mask; outputs clamped at zero.
    pub fn predict(&self, mask: &Array2<T>) -> (Vec<T>, T) {
        let (h, w) = mask.dim();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec([1, 1, h, w], mask.iter().copied().collect()).expect("mask size"));
        let cols = self.forward_columns(&mut g, x);
        let v: Vec<T> = g.value(cols).data().iter().map(|&t| t.max(T::zero())).collect();
        let mean = v.iter().copied().sum::<T>() / T::from_usize_lossy(v.len().max(1));
        (v, mean)
    }

    pub fn save(&self, path: &std::path::Path, epoch: usize) -> Result<()> {
        let cfg = serde_json::to_value(self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        checkpoint::save(path, BIOMARKER_KIND, epoch, cfg, &[&self.store])
    }

    /// Loads a saved network; the result is frozen.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = checkpoint::load::<T>(path)?;
        let config: BiomarkerConfig =
            serde_json::from_value(ck.meta.config.clone()).map_err(|e| Error::Checkpoint(format!("biomarker config: {e}")))?;
        let mut net = Self::new(config, 0)?;
        ck.restore(BIOMARKER_KIND, &mut [&mut net.store])?;
        net.freeze();
        Ok(net)
    }
}

/// Stacks equally sized planes into `(n, 1, h, w)`.
pub(crate) fn stack_planes<T: Scalar>(planes: &[&Array2<T>]) -> Result<Tensor<T>> {
    let (h, w) = planes.first().map(|p| p.dim()).ok_or_else(|| Error::Data("empty batch".into()))?;
    let mut data = Vec::with_capacity(planes.len() * h * w);
    for p in planes {
        if p.dim() != (h, w) {
            return Err(Error::shape(&[h, w], &[p.nrows(), p.ncols()]));
        }
        data.extend(p.iter().copied());
    }
    Tensor::from_vec([planes.len(), 1, h, w], data)
}

pub(crate) fn new_adam<T: Scalar>(opt: &crate::training::OptimizerConfig) -> Adam<T> {
    Adam::new(opt.beta1, opt.beta2)
}

/// Training example: a binary choroid mask and its per-column thickness in pixels.
#[derive(Debug, Clone)]
pub struct MaskSample<T> {
    pub mask: Array2<bool>,
    pub thickness: Vec<T>,
}

impl<T: Scalar> MaskSample<T> {
    pub fn new(mask: &RegionMask, thickness: Vec<T>) -> Result<Self> {
        if thickness.len() != mask.dim().1 {
            return Err(Error::shape(&[mask.dim().1], &[thickness.len()]));
        }
        Ok(Self { mask: mask.mask().clone(), thickness })
    }

    /// Target derived from the mask itself.
    pub fn from_mask(mask: &RegionMask) -> Self {
        Self { mask: mask.mask().clone(), thickness: column_thickness_px(mask) }
    }

    fn mean(&self) -> T {
        self.thickness.iter().copied().sum::<T>() / T::from_usize_lossy(self.thickness.len().max(1))
    }
}

impl<T: Scalar> Augment for MaskSample<T> {
    fn transformed(&self, t: &Transform) -> Self {
        if *t == Transform::IDENTITY {
            return self.clone();
        }
        let mask = RegionMask::new(t.apply_labels(&self.mask));
        Self::from_mask(&mask)
    }

    fn width(&self) -> usize {
        self.mask.ncols()
    }

    fn crop_columns(&self, x0: usize, width: usize) -> Self {
        Self { mask: self.mask.slice(ndarray::s![.., x0..x0 + width]).to_owned(), thickness: self.thickness[x0..x0 + width].to_vec() }
    }
}

struct BioTrainer<'a, T: Scalar> {
    net: &'a mut BiomarkerNet<T>,
    adam: Adam<T>,
}

impl<T: Scalar> BioTrainer<'_, T> {
    fn loss(&self, g: &mut Graph<T>, batch: &[MaskSample<T>]) -> Result<Var> {
        let planes: Vec<Array2<T>> = batch.iter().map(|s| s.mask.mapv(|b| if b { T::one() } else { T::zero() })).collect();
        let x = g.input(stack_planes(&planes.iter().collect::<Vec<_>>())?);
        let (_, b) = self.net.forward(g, x);
        let targets: Vec<T> = batch.iter().map(MaskSample::mean).collect();
        bio_regression_loss(g, b, &targets)
    }
}

impl<T: Scalar> Trainable<MaskSample<T>> for BioTrainer<'_, T> {
    fn loss_names(&self) -> Vec<&'static str> {
        vec!["loss_bio_reg"]
    }

    fn train_batch(&mut self, batch: &[MaskSample<T>]) -> Result<LossReport> {
        let mut g = Graph::new();
        let l = self.loss(&mut g, batch)?;
        let grads = g.backward(l);
        self.net.store.accumulate(&g, &grads);
        let v = g.value(l).data()[0].as_f64();
        Ok(LossReport { total: v, components: vec![v] })
    }

    fn step(&mut self, lr: f64) {
        self.adam.step(&mut self.net.store, T::lit(lr));
    }

    fn evaluate(&self, samples: &[MaskSample<T>]) -> Result<Evaluation> {
        let mut total = 0.0;
        for chunk in samples.chunks(8) {
            let mut g = Graph::new();
            let l = self.loss(&mut g, chunk)?;
            total += g.value(l).data()[0].as_f64() * chunk.len() as f64;
        }
        Ok(Evaluation { loss: total / samples.len().max(1) as f64, dice: None })
    }

    fn snapshot(&self) -> Result<Vec<u8>> {
        checkpoint::encode(BIOMARKER_KIND, 0, serde_json::Value::Null, &[&self.net.store])
    }

    fn restore(&mut self, snapshot: &[u8]) -> Result<()> {
        checkpoint::decode::<T>(snapshot)?.restore(BIOMARKER_KIND, &mut [&mut self.net.store])
    }
}

/// Largest vertical grow/shrink, in rows per boundary, of the jittered training copies.
/// Learning rate for the biomarker net; 1e-2 collapses it to a constant output.
pub const BIOMARKER_LR: f64 = 1e-3;
pub const JITTER_ROWS: usize = 3;

/// Moves both boundaries of every column by `k` rows: outward for `k > 0`, inward for `k < 0`.
pub fn shift_boundaries(mask: &Array2<bool>, k: isize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let r = k.unsigned_abs();
    Array2::from_shape_fn((h, w), |(row, c)| {
        let lo = row.saturating_sub(r);
        let hi = (row + r).min(h - 1);
        if k >= 0 {
            (lo..=hi).any(|rr| mask[[rr, c]])
        } else {
            (row >= r && row + r < h) && (lo..=hi).all(|rr| mask[[rr, c]])
        }
    })
}

/// One copy of each sample with boundaries moved by a random 1..=JITTER_ROWS rows in either direction.
fn jittered<T: Scalar>(samples: &[MaskSample<T>], seed: u64) -> Vec<MaskSample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| {
            let k = rng.random_range(1..=JITTER_ROWS as i64) as isize * if rng.random::<bool>() { 1 } else { -1 };
            MaskSample::from_mask(&RegionMask::new(shift_boundaries(&s.mask, k)))
        })
        .collect()
}

/// Validation error above which the biomarker network counts as not converged.
pub const BIO_CONVERGENCE_PX: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct BiomarkerReport {
    pub train: TrainReport,
    /// Mean absolute error of the mean thickness on the validation split, in pixels.
    pub val_mae_px: f64,
    pub converged: bool,
}

/// Trains on ground-truth masks plus one boundary-jittered copy of each, then freezes the network.
pub fn train_biomarker_net<T: Scalar>(
    samples: &[MaskSample<T>],
    config: BiomarkerConfig,
    train_config: &TrainConfig,
) -> Result<(BiomarkerNet<T>, BiomarkerReport)> {
    let mut net = BiomarkerNet::new(config, crate::seeds::derive(train_config.seed, 0x62_696f, 0))?;
    let mut all = samples.to_vec();
    all.extend(jittered(samples, crate::seeds::derive(train_config.seed, 0x62_696f, 1)));
    let mut trainer = BioTrainer { net: &mut net, adam: new_adam(&train_config.optimizer) };
    let report = train(&mut trainer, &all, train_config, "biomarker", |t, path, epoch| t.net.save(path, epoch))?;
    net.freeze();
    let val_mae_px = report.best_val_loss;
    if val_mae_px > BIO_CONVERGENCE_PX {
        log::warn!("biomarker network validation error {val_mae_px:.2} px exceeds {BIO_CONVERGENCE_PX} px");
    }
    Ok((net, BiomarkerReport { train: report, val_mae_px, converged: val_mae_px <= BIO_CONVERGENCE_PX }))
}
