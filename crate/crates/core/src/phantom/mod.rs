//! Synthetic OCT phantom with exact ground truth for layers, choroid, thickness, vessel
//! shadows and the shadow-free choroid texture.
//!
//! Anatomy is built once per volume in the en-face plane (smooth layer surfaces, tubular
//! choroid vessels, retinal vessels in the GCL) and every frame is a slice through it, so
//! shadows and vessels stay connected across frames.

mod dataset;
mod geometry;

pub use dataset::{generate_dataset, load_dataset, DatasetManifest, DatasetSample, LoadedSample, Split};

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use self::geometry::{vessel_profile, LayerSurfaces, VesselField, VesselPath};
use crate::enface::{choroid_band, derive_rpe_band, project_mean, Band};
use crate::error::{Error, Result};
use crate::oct::{
    thickness_from_mask, BScan, EnFaceImage, Layer, LayerMap, OctVolume, Pitches, RegionMask, ThicknessProfile, LAYER_COUNT,
};
use crate::scalar::Scalar;
use crate::seeds;

const STREAM_GEOMETRY: u64 = 1;
const STREAM_SPECKLE: u64 = 2;

/// Smallest en-face frame extent used for vessel paths, so single B-scans still cut vessels.
const MIN_DOMAIN_FRAMES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub layer_mean_thicknesses_px: [f64; LAYER_COUNT],
    /// Per-sample multiplicative range for the choroid thickness.
    pub choroid_scale_range: (f64, f64),
    pub boundary_wiggle_amplitude_px: f64,
    pub layer_reflectances: [f64; LAYER_COUNT],
    pub choroid_vessel_reflectance: f64,
    pub retinal_vessel_reflectance: f64,
    /// Fraction of the local choroid thickness a vessel occupies at its centre line.
    pub choroid_vessel_depth_extent: f64,
    pub speckle_contrast: f64,
    pub vessel_count_range: (usize, usize),
    pub vessel_radius_range_px: (f64, f64),
    pub shadow_vessel_count_range: (usize, usize),
    pub shadow_vessel_radius_range_px: (f64, f64),
    pub shadow_attenuation: f64,
    pub csi_blur_sigma_px: f64,
    pub pitches: Pitches,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PhantomConfig {
    /// 192 x 192 B-scans, 64 frames.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            width: 192,
            height: 192,
            frames: 64,
            layer_mean_thicknesses_px: [24.0, 10.0, 12.0, 9.0, 9.0, 7.0, 16.0, 9.0, 6.0, 36.0, 30.0, 14.0],
            choroid_scale_range: (0.7, 1.3),
            boundary_wiggle_amplitude_px: 6.0,
            layer_reflectances: [0.04, 0.78, 0.48, 0.62, 0.32, 0.56, 0.22, 0.68, 0.95, 0.55, 0.36, 0.10],
            choroid_vessel_reflectance: 0.15,
            retinal_vessel_reflectance: 0.70,
            choroid_vessel_depth_extent: 0.7,
            speckle_contrast: 0.12,
            vessel_count_range: (6, 9),
            vessel_radius_range_px: (2.0, 4.0),
            shadow_vessel_count_range: (2, 4),
            shadow_vessel_radius_range_px: (1.5, 3.0),
            shadow_attenuation: 0.35,
            csi_blur_sigma_px: 2.0,
            pitches: Pitches::default(),
        }
    }

    /// Full 992 x 512 geometry with 256 frames.
    pub fn full_scale() -> Self {
        let mut c = Self::desk().resized(992, 512);
        c.frames = 256;
        c
    }

    /// Same anatomy rescaled to a new B-scan size (depth scale drives layer thicknesses).
    pub fn resized(mut self, height: usize, width: usize) -> Self {
        let s = height as f64 / self.height as f64;
        for t in &mut self.layer_mean_thicknesses_px {
            *t *= s;
        }
        self.boundary_wiggle_amplitude_px *= s;
        self.csi_blur_sigma_px *= s;
        self.height = height;
        self.width = width;
        self
    }

    /// No speckle, no wiggle, no vessels, no blur: piecewise-constant bands.
    pub fn noiseless(mut self) -> Self {
        self.speckle_contrast = 0.0;
        self.boundary_wiggle_amplitude_px = 0.0;
        self.vessel_count_range = (0, 0);
        self.shadow_vessel_count_range = (0, 0);
        self.csi_blur_sigma_px = 0.0;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("phantom.{key}"), msg));
        if self.width < 8 || self.height < 8 {
            return bad("width", format!("B-scan must be at least 8x8, got {}x{}", self.height, self.width));
        }
        if self.frames == 0 {
            return bad("frames", "must be at least 1".into());
        }
        let sum: f64 = self.layer_mean_thicknesses_px.iter().sum();
        if self.layer_mean_thicknesses_px.iter().any(|&t| !(t >= 0.0)) || sum >= self.height as f64 {
            return bad("layer_mean_thicknesses_px", format!("need non-negative values summing below {}, got {sum}", self.height));
        }
        let r = &self.layer_reflectances;
        if r.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return bad("layer_reflectances", "values must lie in [0, 1]".into());
        }
        if let Some(k) = (1..LAYER_COUNT).find(|&k| (r[k] - r[k - 1]).abs() < 0.05 - 1e-12) {
            return bad("layer_reflectances", format!("layers {} and {k} differ by less than 0.05", k - 1));
        }
        if !(0.0..1.0).contains(&self.speckle_contrast) {
            return bad("speckle_contrast", format!("must lie in [0, 1), got {}", self.speckle_contrast));
        }
        if !(self.shadow_attenuation > 0.0 && self.shadow_attenuation <= 1.0) {
            return bad("shadow_attenuation", format!("must lie in (0, 1], got {}", self.shadow_attenuation));
        }
        for (key, (lo, hi)) in [
            ("vessel_radius_range_px", self.vessel_radius_range_px),
            ("shadow_vessel_radius_range_px", self.shadow_vessel_radius_range_px),
            ("choroid_scale_range", self.choroid_scale_range),
        ] {
            if !(lo > 0.0 && hi >= lo) {
                return bad(key, format!("need 0 < min <= max, got ({lo}, {hi})"));
            }
        }
        for (key, (lo, hi)) in [
            ("vessel_count_range", self.vessel_count_range),
            ("shadow_vessel_count_range", self.shadow_vessel_count_range),
        ] {
            if lo > hi {
                return bad(key, format!("min {lo} exceeds max {hi}"));
            }
        }
        if !(self.csi_blur_sigma_px >= 0.0) || !(self.boundary_wiggle_amplitude_px >= 0.0) {
            return bad("csi_blur_sigma_px", "blur and wiggle must be non-negative".into());
        }
        for (key, v) in [
            ("choroid_vessel_reflectance", self.choroid_vessel_reflectance),
            ("retinal_vessel_reflectance", self.retinal_vessel_reflectance),
            ("choroid_vessel_depth_extent", self.choroid_vessel_depth_extent),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(key, format!("must lie in [0, 1], got {v}"));
            }
        }
        self.pitches.validate().map_err(|e| Error::config("phantom.pitches", e.to_string()))
    }
}

/// One synthetic B-scan with its exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample<T> {
    pub bscan: BScan<T>,
    pub layer_map: LayerMap,
    pub choroid_mask: RegionMask,
    /// Choroid thickness in micrometers.
    pub thickness: ThicknessProfile<T>,
    /// `(frame, A-line)` positions shadowed by a retinal vessel.
    pub shadow_columns: Vec<(usize, usize)>,
    /// The B-scan without vessel shadows, zero outside the choroid.
    pub clean_choroid_texture: Array2<T>,
}

/// Raw en-face projections of a phantom over its ground-truth bands.
/// `choroid` and `clean_choroid` agree exactly outside `shadow_mask`.
#[derive(Debug, Clone)]
pub struct EnFaceTruth<T> {
    pub rpe: EnFaceImage<T>,
    pub choroid: EnFaceImage<T>,
    pub clean_choroid: EnFaceImage<T>,
    pub shadow_mask: RegionMask,
}

/// A phantom volume and the en-face ground truth that goes with it.
#[derive(Debug, Clone)]
pub struct PhantomVolume<T> {
    pub volume: OctVolume<T>,
    pub samples: Vec<PhantomSample<T>>,
    /// En-face `(frame, A-line)` map of retinal-vessel shadows.
    pub shadow_mask: RegionMask,
    /// En-face map of planted choroid vessels.
    pub choroid_vessel_map: RegionMask,
}

impl<T: Scalar> PhantomVolume<T> {
    /// Fraction of en-face pixels covered by planted choroid vessels.
    pub fn planted_vessel_fraction(&self) -> f64 {
        let (f, w) = self.choroid_vessel_map.dim();
        self.choroid_vessel_map.count() as f64 / (f * w) as f64
    }

    pub fn layer_maps(&self) -> Vec<LayerMap> {
        self.samples.iter().map(|s| s.layer_map.clone()).collect()
    }

    pub fn choroid_masks(&self) -> Vec<RegionMask> {
        self.samples.iter().map(|s| s.choroid_mask.clone()).collect()
    }

    /// Raw (unnormalized) en-face projections over the ground-truth bands.
    pub fn enface_truth(&self) -> Result<EnFaceTruth<T>> {
        let choroid_bands = self.samples.iter().map(|s| choroid_band(&s.choroid_mask)).collect::<Result<Vec<Band<T>>>>()?;
        let pitch = self.volume.pitches().axial_um;
        let rpe_bands: Vec<Band<T>> = choroid_bands.iter().map(|b| derive_rpe_band(&b.upper, pitch)).collect();
        let clean_frames = self.samples.iter().map(|s| s.clean_choroid_texture.clone()).collect::<Vec<_>>();
        let mut voxels = Array3::zeros(self.volume.voxels().dim());
        for (f, t) in clean_frames.iter().enumerate() {
            voxels.index_axis_mut(Axis(0), f).assign(t);
        }
        let clean_volume = OctVolume::new(voxels, self.volume.pitches())?;
        Ok(EnFaceTruth {
            rpe: project_mean(&self.volume, &rpe_bands)?.image,
            choroid: project_mean(&self.volume, &choroid_bands)?.image,
            clean_choroid: project_mean(&clean_volume, &choroid_bands)?.image,
            shadow_mask: self.shadow_mask.clone(),
        })
    }
}

struct Anatomy {
    surfaces: LayerSurfaces,
    choroid_vessels: Vec<VesselPath>,
    choroid_field: VesselField,
    retinal_vessels: Vec<VesselPath>,
    retinal_field: VesselField,
    frame_offset: usize,
}

impl Anatomy {
    fn new(cfg: &PhantomConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, STREAM_GEOMETRY, 0));
        let domain = cfg.frames.max(MIN_DOMAIN_FRAMES);
        let (fe, w) = (domain as f64, cfg.width as f64);
        let surfaces = LayerSurfaces::new(
            &mut rng,
            &cfg.layer_mean_thicknesses_px,
            cfg.choroid_scale_range,
            cfg.boundary_wiggle_amplitude_px,
            cfg.height,
            fe,
            w,
        );
        let draw = |rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)| if hi > lo { rand::Rng::random_range(rng, lo..=hi) } else { lo };
        let n_choroid = draw(&mut rng, cfg.vessel_count_range);
        let choroid_vessels: Vec<VesselPath> =
            (0..n_choroid).map(|_| VesselPath::random(&mut rng, fe, w, cfg.vessel_radius_range_px)).collect();
        let n_retinal = draw(&mut rng, cfg.shadow_vessel_count_range);
        let retinal_vessels: Vec<VesselPath> =
            (0..n_retinal).map(|_| VesselPath::random(&mut rng, fe, w, cfg.shadow_vessel_radius_range_px)).collect();
        Self {
            surfaces,
            choroid_field: VesselField::rasterize(&choroid_vessels, domain, cfg.width),
            choroid_vessels,
            retinal_field: VesselField::rasterize(&retinal_vessels, domain, cfg.width),
            retinal_vessels,
            frame_offset: (domain - cfg.frames) / 2,
        }
    }

    fn render<T: Scalar>(&self, cfg: &PhantomConfig, frame: usize) -> Result<PhantomSample<T>> {
        let (h, w) = (cfg.height, cfg.width);
        let fd = frame + self.frame_offset;
        let refl = &cfg.layer_reflectances;
        let mut labels = Array2::<u8>::zeros((h, w));
        let mut clean = Array2::<f64>::zeros((h, w));
        let mut attenuation = Array2::<f64>::ones((h, w));
        let mut shadow_columns = Vec::new();
        let blur = gaussian_kernel(cfg.csi_blur_sigma_px);
        let mut column = vec![0.0; h];
        for a in 0..w {
            let tops = self.surfaces.tops(fd as f64, a as f64);
            let (cd, cv) = self.choroid_field.at(fd, a);
            let (rd, rv) = self.retinal_field.at(fd, a);
            let choroid_top = tops[Layer::Choroid as usize];
            let choroid_bottom = tops[Layer::Sclera as usize];
            let thick = choroid_bottom - choroid_top;
            let choroid_vessel = (cd < 1.0).then(|| {
                let v = &self.choroid_vessels[cv];
                let center = choroid_top + v.depth_center * thick;
                let half = 0.5 * cfg.choroid_vessel_depth_extent * vessel_profile(cd) * thick;
                (center - half, center + half)
            });
            let retinal_vessel = (rd < 1.0).then(|| {
                let v = &self.retinal_vessels[rv];
                let (g0, g1) = (tops[Layer::Gcl as usize], tops[Layer::Ipl as usize]);
                let center = 0.5 * (g0 + g1);
                let half = (v.radius * (1.0 - rd * rd).sqrt()).min(0.5 * (g1 - g0));
                (center - half, center + half)
            });
            if retinal_vessel.is_some() {
                shadow_columns.push((frame, a));
            }
            let mut k = 0;
            for (r, slot) in column.iter_mut().enumerate() {
                let y = r as f64 + 0.5;
                while k + 1 < LAYER_COUNT && tops[k + 1] <= y {
                    k += 1;
                }
                labels[[r, a]] = k as u8;
                let mut v = refl[k];
                if k == Layer::Choroid as usize {
                    if let Some((lo, hi)) = choroid_vessel {
                        if y >= lo && y <= hi {
                            v = cfg.choroid_vessel_reflectance;
                        }
                    }
                }
                if let Some((lo, hi)) = retinal_vessel {
                    if y >= lo && y <= hi {
                        v = cfg.retinal_vessel_reflectance;
                    }
                    if y > hi {
                        attenuation[[r, a]] = cfg.shadow_attenuation;
                    }
                }
                *slot = v;
            }
            // soften the choroid-sclera interface only
            let radius = blur.len() / 2;
            let csi = choroid_bottom.round() as isize;
            for r in 0..h {
                let near = (r as isize - csi).unsigned_abs() <= radius;
                clean[[r, a]] = if near && radius > 0 {
                    blur.iter()
                        .enumerate()
                        .map(|(i, &wgt)| {
                            let rr = (r as isize + i as isize - radius as isize).clamp(0, h as isize - 1) as usize;
                            wgt * column[rr]
                        })
                        .sum()
                } else {
                    column[r]
                };
            }
        }
        let speckle = speckle_field(cfg, frame, h, w);
        let choroid_label = Layer::Choroid.label();
        let mut pixels = Array2::<T>::zeros((h, w));
        let mut texture = Array2::<T>::zeros((h, w));
        for ((r, a), &c) in clean.indexed_iter() {
            let s = speckle.as_ref().map_or(1.0, |s| s[[r, a]]);
            let base = c * s;
            pixels[[r, a]] = T::lit((base * attenuation[[r, a]]).clamp(0.0, 1.0));
            if labels[[r, a]] == choroid_label {
                texture[[r, a]] = T::lit(base.clamp(0.0, 1.0));
            }
        }
        let layer_map = LayerMap::new(labels)?;
        let choroid_mask = layer_map.region(Layer::Choroid);
        let thickness = thickness_from_mask(&choroid_mask, cfg.pitches.axial_um)?;
        Ok(PhantomSample {
            bscan: BScan::new(pixels, cfg.pitches)?,
            layer_map,
            choroid_mask,
            thickness,
            shadow_columns,
            clean_choroid_texture: texture,
        })
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Unit-mean gamma speckle with the configured contrast (std / mean).
fn speckle_field(cfg: &PhantomConfig, frame: usize, h: usize, w: usize) -> Option<Array2<f64>> {
    if cfg.speckle_contrast <= 0.0 {
        return None;
    }
    let c2 = cfg.speckle_contrast * cfg.speckle_contrast;
    let gamma = Gamma::new(1.0 / c2, c2).expect("valid gamma parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, STREAM_SPECKLE, frame as u64));
    Some(Array2::from_shape_simple_fn((h, w), || gamma.sample(&mut rng)))
}

/// One frame of the phantom volume described by `config`.
pub fn generate_bscan<T: Scalar>(config: &PhantomConfig, frame_index: usize) -> Result<PhantomSample<T>> {
    config.validate()?;
    if frame_index >= config.frames {
        return Err(Error::config("phantom.frames", format!("frame {frame_index} outside 0..{}", config.frames)));
    }
    Anatomy::new(config).render(config, frame_index)
}

pub fn generate_volume<T: Scalar>(config: &PhantomConfig) -> Result<PhantomVolume<T>> {
    config.validate()?;
    let anatomy = Anatomy::new(config);
    let samples = (0..config.frames).map(|f| anatomy.render(config, f)).collect::<Result<Vec<_>>>()?;
    let frames: Vec<BScan<T>> = samples.iter().map(|s| s.bscan.clone()).collect();
    let volume = OctVolume::from_bscans(&frames)?;
    let mut shadow = Array2::from_elem((config.frames, config.width), false);
    for s in &samples {
        for &(f, a) in &s.shadow_columns {
            shadow[[f, a]] = true;
        }
    }
    let vessels = Array2::from_shape_fn((config.frames, config.width), |(f, a)| {
        anatomy.choroid_field.inside(f + anatomy.frame_offset, a)
    });
    Ok(PhantomVolume {
        volume,
        samples,
        shadow_mask: RegionMask::new(shadow),
        choroid_vessel_map: RegionMask::new(vessels),
    })
}
