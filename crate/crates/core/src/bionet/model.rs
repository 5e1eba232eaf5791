use std::path::Path;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::biomarker::{new_adam, stack_planes, BiomarkerNet};
use super::losses::{bio_consistency_loss, bio_reference, choroid_loss, multilayer_loss, one_hot, total_loss_var, LossWeights};
use super::unet::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::metrics::seg_scores;
use crate::nn::{Adam, Graph, ParamStore, Tensor, Var};
use crate::oct::{column_thickness_px, BScan, Layer, LayerMap, RegionMask, ThicknessProfile, LAYER_COUNT};
use crate::scalar::Scalar;
use crate::training::{checkpoint, train, Augment, Evaluation, LossReport, TrainConfig, TrainReport, Trainable, Transform};
use crate::{imgproc, seeds};

pub const BIONET_KIND: &str = "bionet";

/// Which parts of the model are built and which losses are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Local U-Net on the raw image, choroid loss only.
    Baseline,
    /// Global multi-layer module alone; choroid read from its argmax.
    GmsOnly,
    /// Global then local module, no biomarker term.
    #[serde(rename = "gms")]
    UnetGms,
    /// Local U-Net on the raw image plus the biomarker term.
    #[serde(rename = "bio")]
    UnetBio,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::GmsOnly, Variant::UnetGms, Variant::UnetBio, Variant::Full];

    pub fn uses_global(self) -> bool {
        matches!(self, Variant::GmsOnly | Variant::UnetGms | Variant::Full)
    }

    pub fn uses_local(self) -> bool {
        self != Variant::GmsOnly
    }

    pub fn uses_bio(self) -> bool {
        matches!(self, Variant::UnetBio | Variant::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "U-Net",
            Variant::GmsOnly => "GMS",
            Variant::UnetGms => "U-Net+GMS",
            Variant::UnetBio => "U-Net+Bio",
            Variant::Full => "Bio-Net",
        }
    }

    /// Parses the command-line spelling (`baseline`, `gms`, `bio`, `full`, `gms-only`).
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "gms-only" => Ok(Variant::GmsOnly),
            "gms" => Ok(Variant::UnetGms),
            "bio" => Ok(Variant::UnetBio),
            "full" => Ok(Variant::Full),
            _ => Err(Error::config("ablation", format!("unknown variant '{s}' (expected baseline, gms, bio, full or gms-only)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BioNetConfig {
    pub variant: Variant,
    pub base_channels: usize,
    pub levels: usize,
    pub weights: LossWeights,
}

impl Default for BioNetConfig {
    fn default() -> Self {
        Self { variant: Variant::Full, base_channels: 8, levels: 4, weights: LossWeights::default() }
    }
}

impl BioNetConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self { variant, ..Self::default() }
    }

    fn unet(&self, cin: usize, cout: usize) -> UNetConfig {
        UNetConfig { in_channels: cin, out_channels: cout, base_channels: self.base_channels, levels: self.levels }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.unet(1, 1).validate()
    }
}

/// U_G: B-scan to 12-class probabilities.
#[derive(Debug, Clone)]
pub struct GlobalSegmenter<T: Scalar> {
    net: UNet,
    store: ParamStore<T>,
}

/// U_c: image (optionally with the 12 global probabilities) to choroid probability.
#[derive(Debug, Clone)]
pub struct LocalSegmenter<T: Scalar> {
    net: UNet,
    store: ParamStore<T>,
}

#[derive(Debug, Clone)]
pub struct BioNet<T: Scalar> {
    config: BioNetConfig,
    global: Option<GlobalSegmenter<T>>,
    local: Option<LocalSegmenter<T>>,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub g_pred: Option<Var>,
    pub c_pred: Option<Var>,
}

impl<T: Scalar> BioNet<T> {
    pub fn new(config: BioNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 0x6269_6f6e, 0));
        let global = if config.variant.uses_global() {
            let mut store = ParamStore::new();
            let net = UNet::new(&mut store, "global", config.unet(1, LAYER_COUNT), &mut rng)?;
            Some(GlobalSegmenter { net, store })
        } else {
            None
        };
        let local = if config.variant.uses_local() {
            let cin = if config.variant.uses_global() { 1 + LAYER_COUNT } else { 1 };
            let mut store = ParamStore::new();
            let net = UNet::new(&mut store, "local", config.unet(cin, 1), &mut rng)?;
            Some(LocalSegmenter { net, store })
        } else {
            None
        };
        Ok(Self { config, global, local })
    }

    pub fn config(&self) -> BioNetConfig {
        self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn size_multiple(&self) -> usize {
        1 << self.config.levels
    }

    pub fn num_parameters(&self) -> usize {
        self.global.as_ref().map_or(0, |m| m.store.num_scalars()) + self.local.as_ref().map_or(0, |m| m.store.num_scalars())
    }

    fn stores(&self) -> Vec<&ParamStore<T>> {
        self.global.iter().map(|m| &m.store).chain(self.local.iter().map(|m| &m.store)).collect()
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        let Self { global, local, .. } = self;
        global.iter_mut().map(|m| &mut m.store).chain(local.iter_mut().map(|m| &mut m.store)).collect()
    }

    /// Forward pass on images `(n, 1, h, w)`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Outputs> {
        let shape = g.value(x).shape();
        let g_pred = match &self.global {
            Some(m) => {
                m.net.check_input(shape)?;
                let z = m.net.forward(g, &m.store, x);
                Some(g.softmax_channels(z))
            }
            None => None,
        };
        let c_pred = match &self.local {
            Some(m) => {
                let input = match g_pred {
                    Some(p) => g.concat(&[x, p]),
                    None => x,
                };
                m.net.check_input(g.value(input).shape())?;
                let z = m.net.forward(g, &m.store, input);
                Some(g.sigmoid(z))
            }
            None => None,
        };
        Ok(Outputs { g_pred, c_pred })
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        let cfg = serde_json::to_value(self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        checkpoint::save(path, BIONET_KIND, epoch, cfg, &self.stores())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load::<T>(path)?;
        let config: BioNetConfig =
            serde_json::from_value(ck.meta.config.clone()).map_err(|e| Error::Checkpoint(format!("bionet config: {e}")))?;
        let mut net = Self::new(config, 0)?;
        ck.restore(BIONET_KIND, &mut net.stores_mut())?;
        Ok(net)
    }
}

/// One training example: image, 12-class labels and the choroid mask.
#[derive(Debug, Clone)]
pub struct SegSample<T> {
    pub image: Array2<T>,
    pub layers: Array2<u8>,
    pub choroid: Array2<bool>,
}

impl<T: Scalar> SegSample<T> {
    pub fn new(image: Array2<T>, layers: &LayerMap, choroid: &RegionMask) -> Result<Self> {
        if image.dim() != layers.dim() || image.dim() != choroid.dim() {
            return Err(Error::shape(&[image.nrows(), image.ncols()], &[layers.dim().0, layers.dim().1]));
        }
        Ok(Self { image, layers: layers.labels().clone(), choroid: choroid.mask().clone() })
    }
}

impl<T: Scalar> Augment for SegSample<T> {
    fn transformed(&self, t: &Transform) -> Self {
        Self { image: t.apply_image(&self.image), layers: t.apply_labels(&self.layers), choroid: t.apply_labels(&self.choroid) }
    }

    fn width(&self) -> usize {
        self.image.ncols()
    }

    fn crop_columns(&self, x0: usize, width: usize) -> Self {
        let sl = s![.., x0..x0 + width];
        Self {
            image: self.image.slice(sl).to_owned(),
            layers: self.layers.slice(sl).to_owned(),
            choroid: self.choroid.slice(sl).to_owned(),
        }
    }
}

struct BioNetTrainer<'a, T: Scalar> {
    model: &'a mut BioNet<T>,
    bio: Option<&'a BiomarkerNet<T>>,
    adams: Vec<Adam<T>>,
    batch_size: usize,
}

struct BatchLoss {
    total: Var,
    parts: [Option<Var>; 3],
}

impl<T: Scalar> BioNetTrainer<'_, T> {
    fn batch_loss(&self, g: &mut Graph<T>, batch: &[SegSample<T>]) -> Result<(BatchLoss, Outputs)> {
        let images: Vec<&Array2<T>> = batch.iter().map(|s| &s.image).collect();
        let x = g.input(stack_planes(&images)?);
        let out = self.model.forward(g, x)?;
        let weights = self.model.config.weights;
        let l_multi = match out.g_pred {
            Some(p) => {
                let labels: Vec<&Array2<u8>> = batch.iter().map(|s| &s.layers).collect();
                Some(multilayer_loss(g, p, one_hot(&labels)?)?)
            }
            None => None,
        };
        let (l_choroid, l_bio) = match out.c_pred {
            Some(c) => {
                let masks: Vec<Array2<T>> = batch.iter().map(|s| s.choroid.mapv(|b| if b { T::one() } else { T::zero() })).collect();
                let gt = stack_planes(&masks.iter().collect::<Vec<_>>())?;
                let l_bio = match (self.model.variant().uses_bio(), self.bio) {
                    (true, Some(bio)) => {
                        let b_ref = bio_reference(bio, &gt);
                        Some(bio_consistency_loss(g, c, bio, &b_ref)?)
                    }
                    (true, None) => return Err(Error::Precondition("variant needs a biomarker network".into())),
                    _ => None,
                };
                (Some(choroid_loss(g, c, gt)?), l_bio)
            }
            None => (None, None),
        };
        let parts = [l_multi, l_choroid, l_bio];
        let total = total_loss_var(g, parts, &weights)?;
        Ok((BatchLoss { total, parts }, out))
    }

    fn report(g: &Graph<T>, loss: &BatchLoss) -> LossReport {
        let v = |p: Option<Var>| p.map_or(0.0, |p| g.value(p).data()[0].as_f64());
        LossReport { total: g.value(loss.total).data()[0].as_f64(), components: loss.parts.iter().map(|&p| v(p)).collect() }
    }
}

/// Choroid decision per pixel from a forward pass (threshold or argmax).
fn choroid_decision<T: Scalar>(g: &Graph<T>, out: &Outputs, n: usize) -> Vec<Array2<bool>> {
    if let Some(c) = out.c_pred {
        let t = g.value(c);
        let [_, _, h, w] = t.shape();
        (0..n)
            .map(|i| Array2::from_shape_vec((h, w), t.plane(i, 0).iter().map(|&v| v.as_f64() > 0.5).collect()).expect("plane"))
            .collect()
    } else {
        let t = g.value(out.g_pred.expect("some head"));
        (0..n).map(|i| argmax_labels(t, i).mapv(|l| l == Layer::Choroid.label())).collect()
    }
}

fn argmax_labels<T: Scalar>(t: &Tensor<T>, n: usize) -> Array2<u8> {
    let [_, c, h, w] = t.shape();
    Array2::from_shape_fn((h, w), |(r, col)| {
        let mut best = 0usize;
        for k in 1..c {
            if t.at([n, k, r, col]) > t.at([n, best, r, col]) {
                best = k;
            }
        }
        best as u8
    })
}

impl<T: Scalar> Trainable<SegSample<T>> for BioNetTrainer<'_, T> {
    fn loss_names(&self) -> Vec<&'static str> {
        vec!["loss_multilayers", "loss_choroid", "loss_bio"]
    }

    fn train_batch(&mut self, batch: &[SegSample<T>]) -> Result<LossReport> {
        let mut g = Graph::new();
        let (loss, _) = self.batch_loss(&mut g, batch)?;
        let grads = g.backward(loss.total);
        for store in self.model.stores_mut() {
            store.accumulate(&g, &grads);
        }
        Ok(Self::report(&g, &loss))
    }

    fn step(&mut self, lr: f64) {
        let lr = T::lit(lr);
        for (store, adam) in self.model.stores_mut().into_iter().zip(&mut self.adams) {
            adam.step(store, lr);
        }
    }

    fn evaluate(&self, samples: &[SegSample<T>]) -> Result<Evaluation> {
        let (mut loss, mut dice) = (0.0, 0.0);
        for chunk in samples.chunks(self.batch_size) {
            let mut g = Graph::new();
            let (l, out) = self.batch_loss(&mut g, chunk)?;
            loss += Self::report(&g, &l).total * chunk.len() as f64;
            for (pred, s) in choroid_decision(&g, &out, chunk.len()).iter().zip(chunk) {
                dice += seg_scores::<f64>(&RegionMask::new(pred.clone()), &RegionMask::new(s.choroid.clone()))?.di;
            }
        }
        let n = samples.len().max(1) as f64;
        Ok(Evaluation { loss: loss / n, dice: Some(dice / n) })
    }

    fn snapshot(&self) -> Result<Vec<u8>> {
        checkpoint::encode(BIONET_KIND, 0, serde_json::Value::Null, &self.model.stores())
    }

    fn restore(&mut self, snapshot: &[u8]) -> Result<()> {
        checkpoint::decode::<T>(snapshot)?.restore(BIONET_KIND, &mut self.model.stores_mut())
    }
}

/// Trains every module of `config.variant` jointly under the weighted objective.
/// Variants with the biomarker term require a frozen `bio` network.
pub fn train_bionet<T: Scalar>(
    samples: &[SegSample<T>],
    bio: Option<&BiomarkerNet<T>>,
    config: &BioNetConfig,
    train_config: &TrainConfig,
) -> Result<(BioNet<T>, TrainReport)> {
    if config.variant.uses_bio() {
        match bio {
            None => return Err(Error::Precondition(format!("variant {} needs a biomarker network", config.variant.name()))),
            Some(b) if !b.is_frozen() => return Err(Error::Precondition("biomarker network must be frozen".into())),
            _ => {}
        }
    }
    let mut model = BioNet::new(*config, train_config.seed)?;
    let m = model.size_multiple();
    if let Some(s) = samples.iter().find(|s| s.image.nrows() % m != 0 || train_config.crop_width.unwrap_or(s.image.ncols()).min(s.image.ncols()) % m != 0) {
        return Err(Error::Data(format!("training images must have sizes divisible by {m}, got {:?}", s.image.dim())));
    }
    let adams = model.stores().iter().map(|_| new_adam(&train_config.optimizer)).collect();
    let mut trainer = BioNetTrainer { model: &mut model, bio, adams, batch_size: train_config.batch_size };
    let name = format!("bionet_{}", variant_slug(config.variant));
    let report = train(&mut trainer, samples, train_config, &name, |t, path, epoch| t.model.save(path, epoch))?;
    Ok((model, report))
}

pub fn variant_slug(v: Variant) -> &'static str {
    match v {
        Variant::Baseline => "baseline",
        Variant::GmsOnly => "gms-only",
        Variant::UnetGms => "gms",
        Variant::UnetBio => "bio",
        Variant::Full => "full",
    }
}

/// Inference result for one B-scan.
#[derive(Debug, Clone)]
pub struct Segmentation<T> {
    pub choroid: RegionMask,
    /// Argmax of the global module, when the variant has one.
    pub layers: Option<LayerMap>,
    /// `None` when the predicted choroid is empty.
    pub thickness: Option<ThicknessProfile<T>>,
    pub empty: bool,
    /// Choroid probability (local module) or the choroid class probability (global only).
    pub probability: Array2<T>,
}

fn pad_to<T: Scalar>(img: &Array2<T>, m: usize) -> Array2<T> {
    let (h, w) = img.dim();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    Array2::from_shape_fn((ph, pw), |(r, c)| img[[r.min(h - 1), c.min(w - 1)]])
}

/// Intensity range below which a B-scan is treated as blank (no tissue signal).
pub const MIN_SIGNAL_RANGE: f64 = 1e-6;

/// Per-column foreground count times the axial pitch; columns without foreground are invalid.
fn thickness_from_counts<T: Scalar>(mask: &RegionMask, axial_um: f64) -> Result<ThicknessProfile<T>> {
    let cols = column_thickness_px::<f64>(mask);
    ThicknessProfile::from_columns(cols.into_iter().map(|c| (c > 0.0).then(|| T::lit(c * axial_um))).collect())
}

/// Segments one B-scan: threshold 0.5, keep the largest component, derive thickness.
/// A constant image yields an empty, flagged result.
pub fn segment_choroid<T: Scalar>(bscan: &BScan<T>, model: &BioNet<T>) -> Result<Segmentation<T>> {
    let img = bscan.pixels();
    let (h, w) = img.dim();
    if h == 0 || w == 0 {
        return Err(Error::Data("empty B-scan".into()));
    }
    let padded = pad_to(img, model.size_multiple());
    let mut g = Graph::new();
    let x = g.input(stack_planes(&[&padded])?);
    let out = model.forward(&mut g, x)?;
    let crop = |a: Array2<T>| a.slice(s![..h, ..w]).to_owned();
    let layers = match out.g_pred {
        Some(p) => Some(LayerMap::new(argmax_labels(g.value(p), 0).slice(s![..h, ..w]).to_owned())?),
        None => None,
    };
    let probability = match (out.c_pred, out.g_pred) {
        (Some(c), _) => {
            let t = g.value(c);
            let [_, _, ph, pw] = t.shape();
            crop(Array2::from_shape_vec((ph, pw), t.plane(0, 0).to_vec()).expect("plane"))
        }
        (None, Some(p)) => {
            let t = g.value(p);
            let [_, _, ph, pw] = t.shape();
            crop(Array2::from_shape_vec((ph, pw), t.plane(0, Layer::Choroid.label() as usize).to_vec()).expect("plane"))
        }
        (None, None) => unreachable!("every variant has a head"),
    };
    let raw = match (&layers, out.c_pred) {
        (Some(l), None) => l.labels().mapv(|v| v == Layer::Choroid.label()),
        _ => probability.mapv(|p| p.as_f64() > 0.5),
    };
    let (lo, hi) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.as_f64()), hi.max(v.as_f64())));
    let choroid = if hi - lo < MIN_SIGNAL_RANGE {
        RegionMask::empty((h, w))
    } else {
        RegionMask::new(imgproc::largest_component(&raw))
    };
    let empty = choroid.is_empty();
    let thickness = if empty { None } else { Some(thickness_from_counts(&choroid, bscan.pitches().axial_um)?) };
    Ok(Segmentation { choroid, layers, thickness, empty, probability })
}
