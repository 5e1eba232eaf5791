use std::path::Path;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::refine::refine_mask;
use crate::bionet::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::metrics::seg_scores;
use crate::nn::{Adam, Graph, ParamStore, Tensor, Var};
use crate::oct::{EnFaceImage, RegionMask};
use crate::scalar::Scalar;
use crate::training::{checkpoint, train, Augment, Evaluation, LossReport, TrainConfig, TrainReport, Trainable, Transform};
use crate::seeds;

pub const SHADOW_SEG_KIND: &str = "shadow-seg";
const EPS: f64 = 1e-7;

/// U-Net from an en-face RPE image to shadow probability.
#[derive(Debug, Clone)]
pub struct ShadowSegmenter<T: Scalar> {
    net: UNet,
    store: ParamStore<T>,
}

impl<T: Scalar> ShadowSegmenter<T> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.in_channels != 1 || config.out_channels != 1 {
            return Err(Error::config("shadow_seg.unet", "shadow segmenter maps one channel to one channel"));
        }
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, "shadow", config, &mut ChaCha8Rng::seed_from_u64(seeds::derive(seed, 0x7368, 0)))?;
        Ok(Self { net, store })
    }

    pub fn config(&self) -> UNetConfig {
        self.net.config()
    }

    fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.net.check_input(g.value(x).shape())?;
        let z = self.net.forward(g, &self.store, x);
        Ok(g.sigmoid(z))
    }

    /// Shadow probability for one image of any size (edge-padded to the U-Net multiple).
    pub fn probability(&self, rpe: &EnFaceImage<T>) -> Result<Array2<T>> {
        let img = rpe.pixels();
        let (h, w) = img.dim();
        let m = self.config().size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let padded = Array2::from_shape_fn((ph, pw), |(r, c)| img[[r.min(h - 1), c.min(w - 1)]]);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec([1, 1, ph, pw], padded.iter().copied().collect())?);
        let p = self.forward(&mut g, x)?;
        let full = Array2::from_shape_vec((ph, pw), g.value(p).data().to_vec()).expect("plane");
        Ok(full.slice(s![..h, ..w]).to_owned())
    }

    /// Raw detection: probability above 0.5.
    pub fn segment(&self, rpe: &EnFaceImage<T>) -> Result<RegionMask> {
        Ok(RegionMask::new(self.probability(rpe)?.mapv(|p| p.as_f64() > 0.5)))
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        let cfg = serde_json::to_value(self.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        checkpoint::save(path, SHADOW_SEG_KIND, epoch, cfg, &[&self.store])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load::<T>(path)?;
        let config: UNetConfig = serde_json::from_value(ck.meta.config.clone()).map_err(|e| Error::Checkpoint(format!("shadow config: {e}")))?;
        let mut m = Self::new(config, 0)?;
        ck.restore(SHADOW_SEG_KIND, &mut [&mut m.store])?;
        Ok(m)
    }
}

/// Segment, then refine: the shadow mask handed to inpainting.
pub fn locate_shadows<T: Scalar>(rpe: &EnFaceImage<T>, model: &ShadowSegmenter<T>) -> Result<RegionMask> {
    Ok(refine_mask(&model.segment(rpe)?))
}

#[derive(Debug, Clone)]
pub struct ShadowSample<T> {
    pub image: Array2<T>,
    pub mask: Array2<bool>,
}

impl<T: Scalar> ShadowSample<T> {
    pub fn new(rpe: &EnFaceImage<T>, mask: &RegionMask) -> Result<Self> {
        if rpe.dim() != mask.dim() {
            return Err(Error::shape(&[rpe.dim().0, rpe.dim().1], &[mask.dim().0, mask.dim().1]));
        }
        Ok(Self { image: rpe.pixels().clone(), mask: mask.mask().clone() })
    }
}

impl<T: Scalar> Augment for ShadowSample<T> {
    fn transformed(&self, t: &Transform) -> Self {
        Self { image: t.apply_image(&self.image), mask: t.apply_labels(&self.mask) }
    }

    fn width(&self) -> usize {
        self.image.ncols()
    }

    fn crop_columns(&self, x0: usize, width: usize) -> Self {
        let sl = s![.., x0..x0 + width];
        Self { image: self.image.slice(sl).to_owned(), mask: self.mask.slice(sl).to_owned() }
    }
}

struct SegTrainer<'a, T: Scalar> {
    model: &'a mut ShadowSegmenter<T>,
    adam: Adam<T>,
}

impl<T: Scalar> SegTrainer<'_, T> {
    fn loss(&self, g: &mut Graph<T>, batch: &[ShadowSample<T>]) -> Result<(Var, Var)> {
        let (h, w) = batch[0].image.dim();
        let mut x = Vec::with_capacity(batch.len() * h * w);
        let mut y = Vec::with_capacity(batch.len() * h * w);
        for s in batch {
            if s.image.dim() != (h, w) {
                return Err(Error::shape(&[h, w], &[s.image.nrows(), s.image.ncols()]));
            }
            x.extend(s.image.iter().copied());
            y.extend(s.mask.iter().map(|&b| if b { T::one() } else { T::zero() }));
        }
        let shape = [batch.len(), 1, h, w];
        let xin = g.input(Tensor::from_vec(shape, x)?);
        let p = self.model.forward(g, xin)?;
        Ok((g.bce(p, Tensor::from_vec(shape, y)?, T::lit(EPS)), p))
    }
}

impl<T: Scalar> Trainable<ShadowSample<T>> for SegTrainer<'_, T> {
    fn loss_names(&self) -> Vec<&'static str> {
        vec!["loss_bce"]
    }

    fn train_batch(&mut self, batch: &[ShadowSample<T>]) -> Result<LossReport> {
        let mut g = Graph::new();
        let (l, _) = self.loss(&mut g, batch)?;
        let grads = g.backward(l);
        self.model.store.accumulate(&g, &grads);
        let v = g.value(l).data()[0].as_f64();
        Ok(LossReport { total: v, components: vec![v] })
    }

    fn step(&mut self, lr: f64) {
        self.adam.step(&mut self.model.store, T::lit(lr));
    }

    fn evaluate(&self, samples: &[ShadowSample<T>]) -> Result<Evaluation> {
        let (mut loss, mut dice) = (0.0, 0.0);
        for s in samples {
            let mut g = Graph::new();
            let (l, p) = self.loss(&mut g, std::slice::from_ref(s))?;
            loss += g.value(l).data()[0].as_f64();
            let (h, w) = s.image.dim();
            let pred = Array2::from_shape_vec((h, w), g.value(p).data().iter().map(|v| v.as_f64() > 0.5).collect()).expect("plane");
            dice += seg_scores::<f64>(&RegionMask::new(pred), &RegionMask::new(s.mask.clone()))?.di;
        }
        let n = samples.len().max(1) as f64;
        Ok(Evaluation { loss: loss / n, dice: Some(dice / n) })
    }

    fn snapshot(&self) -> Result<Vec<u8>> {
        checkpoint::encode(SHADOW_SEG_KIND, 0, serde_json::Value::Null, &[&self.model.store])
    }

    fn restore(&mut self, snapshot: &[u8]) -> Result<()> {
        checkpoint::decode::<T>(snapshot)?.restore(SHADOW_SEG_KIND, &mut [&mut self.model.store])
    }
}

/// Trains the shadow U-Net on (RPE en-face, ground-truth shadow mask) pairs.
pub fn train_shadow_segmenter<T: Scalar>(
    pairs: &[ShadowSample<T>],
    config: UNetConfig,
    train_config: &TrainConfig,
) -> Result<(ShadowSegmenter<T>, TrainReport)> {
    let mut model = ShadowSegmenter::new(config, train_config.seed)?;
    let m = config.size_multiple();
    if let Some(s) = pairs.iter().find(|s| s.image.nrows() % m != 0 || s.image.ncols() % m != 0) {
        return Err(Error::Data(format!("en-face sizes must be divisible by {m}, got {:?}", s.image.dim())));
    }
    let mut trainer = SegTrainer { model: &mut model, adam: Adam::new(train_config.optimizer.beta1, train_config.optimizer.beta2) };
    let report = train(&mut trainer, pairs, train_config, "shadow_seg", |t, p, e| t.model.save(p, e))?;
    Ok((model, report))
}
