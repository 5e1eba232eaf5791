//! Data model for OCT volumes, B-scans, layer labels, region masks, boundaries and en-face images.
//!
//! Axis order is fixed everywhere: volumes are `(frame, depth-row, A-line)`, B-scans are
//! `(depth-row, A-line)` and en-face images are `(frame, A-line)`.

mod boundary;
pub mod io;

pub use boundary::{
    boundary_from_mask, column_thickness_px, mask_from_boundaries, thickness_from_boundaries,
    thickness_from_mask,
};

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Axial pitch of a 992-sample A-line spanning roughly 3 mm of depth.
pub const DEFAULT_AXIAL_PITCH_UM: f64 = 3000.0 / 992.0;
/// 512 A-lines over a 6 mm field of view.
pub const DEFAULT_LATERAL_PITCH_UM: f64 = 6000.0 / 512.0;
/// 256 frames over a 6 mm field of view.
pub const DEFAULT_FRAME_PITCH_UM: f64 = 6000.0 / 256.0;

/// Reserved row value marking a column without any foreground pixel.
pub const EMPTY_ROW: f64 = -1.0;

/// Physical sample spacing in micrometers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pitches {
    pub axial_um: f64,
    pub lateral_um: f64,
    pub frame_um: f64,
}

impl Default for Pitches {
    fn default() -> Self {
        Self {
            axial_um: DEFAULT_AXIAL_PITCH_UM,
            lateral_um: DEFAULT_LATERAL_PITCH_UM,
            frame_um: DEFAULT_FRAME_PITCH_UM,
        }
    }
}

impl Pitches {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("axial_pitch_um", self.axial_um),
            ("lateral_pitch_um", self.lateral_um),
            ("frame_pitch_um", self.frame_um),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Data(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_unit_range<'a, T: Scalar>(values: impl IntoIterator<Item = &'a T>) -> Result<()> {
    for &v in values {
        if !(v >= T::zero() && v <= T::one()) {
            return Err(Error::Data(format!("intensity {v} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Reflectance volume indexed `(frame, depth-row, A-line)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OctVolume<T> {
    voxels: Array3<T>,
    pitches: Pitches,
}

impl<T: Scalar> OctVolume<T> {
    pub fn new(voxels: Array3<T>, pitches: Pitches) -> Result<Self> {
        if voxels.shape().contains(&0) {
            return Err(Error::Data(format!("empty volume dimension {:?}", voxels.shape())));
        }
        pitches.validate()?;
        check_unit_range(voxels.iter())?;
        Ok(Self { voxels, pitches })
    }

    pub fn voxels(&self) -> &Array3<T> {
        &self.voxels
    }

    pub fn pitches(&self) -> Pitches {
        self.pitches
    }

    pub fn frames(&self) -> usize {
        self.voxels.shape()[0]
    }

    pub fn depth(&self) -> usize {
        self.voxels.shape()[1]
    }

    pub fn alines(&self) -> usize {
        self.voxels.shape()[2]
    }

    pub fn frame(&self, index: usize) -> ArrayView2<'_, T> {
        self.voxels.index_axis(Axis(0), index)
    }

    /// Copies one frame out as a B-scan.
    pub fn bscan(&self, index: usize) -> Result<BScan<T>> {
        BScan::new(self.frame(index).to_owned(), self.pitches)
    }

    /// Stacks equally sized B-scans into a volume.
    pub fn from_bscans(frames: &[BScan<T>]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Data("cannot build a volume from zero frames".into()))?;
        let (h, w) = first.dim();
        let mut voxels = Array3::zeros((frames.len(), h, w));
        for (f, b) in frames.iter().enumerate() {
            if b.dim() != (h, w) {
                return Err(Error::shape(&[h, w], &[b.dim().0, b.dim().1]));
            }
            voxels.index_axis_mut(Axis(0), f).assign(b.pixels());
        }
        Self::new(voxels, first.pitches())
    }
}

/// A single cross-sectional image, `(depth-row, A-line)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BScan<T> {
    pixels: Array2<T>,
    pitches: Pitches,
}

/// Smallest accepted B-scan side length.
pub const MIN_BSCAN_SIDE: usize = 8;

impl<T: Scalar> BScan<T> {
    pub fn new(pixels: Array2<T>, pitches: Pitches) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h < MIN_BSCAN_SIDE || w < MIN_BSCAN_SIDE {
            return Err(Error::Data(format!("B-scan {h}x{w} smaller than {MIN_BSCAN_SIDE}x{MIN_BSCAN_SIDE}")));
        }
        pitches.validate()?;
        check_unit_range(pixels.iter())?;
        Ok(Self { pixels, pitches })
    }

    pub fn pixels(&self) -> &Array2<T> {
        &self.pixels
    }

    pub fn pitches(&self) -> Pitches {
        self.pitches
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn into_pixels(self) -> Array2<T> {
        self.pixels
    }
}

/// Anatomical layers, ordered top (vitreous side) to bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Layer {
    BackgroundAbove = 0,
    Rnfl,
    Gcl,
    Ipl,
    Inl,
    Opl,
    Onl,
    Prl,
    Rpe,
    Choroid,
    Sclera,
    BackgroundBelow,
}

pub const LAYER_COUNT: usize = 12;

impl Layer {
    pub const ALL: [Layer; LAYER_COUNT] = [
        Layer::BackgroundAbove,
        Layer::Rnfl,
        Layer::Gcl,
        Layer::Ipl,
        Layer::Inl,
        Layer::Opl,
        Layer::Onl,
        Layer::Prl,
        Layer::Rpe,
        Layer::Choroid,
        Layer::Sclera,
        Layer::BackgroundBelow,
    ];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn from_label(label: u8) -> Option<Layer> {
        Layer::ALL.get(label as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Layer::BackgroundAbove => "background-above",
            Layer::Rnfl => "RNFL",
            Layer::Gcl => "GCL",
            Layer::Ipl => "IPL",
            Layer::Inl => "INL",
            Layer::Opl => "OPL",
            Layer::Onl => "ONL",
            Layer::Prl => "PRL",
            Layer::Rpe => "RPE",
            Layer::Choroid => "choroid",
            Layer::Sclera => "sclera",
            Layer::BackgroundBelow => "background-below",
        }
    }
}

/// Per-pixel layer labels in `0..12`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMap {
    labels: Array2<u8>,
}

impl LayerMap {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= LAYER_COUNT) {
            return Err(Error::Data(format!("layer label {bad} outside 0..{LAYER_COUNT}")));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn region(&self, layer: Layer) -> RegionMask {
        RegionMask::new(self.labels.mapv(|l| l == layer.label()))
    }

    /// Columns whose labels are not a top-to-bottom ordered stack of contiguous runs.
    ///
    /// With the canonical numbering this is exactly "labels are non-decreasing down the column".
    pub fn ordering_violations(&self) -> Vec<usize> {
        self.labels
            .axis_iter(Axis(1))
            .enumerate()
            .filter(|(_, col)| col.iter().zip(col.iter().skip(1)).any(|(a, b)| b < a))
            .map(|(c, _)| c)
            .collect()
    }

    pub fn into_labels(self) -> Array2<u8> {
        self.labels
    }
}

/// Binary region mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    mask: Array2<bool>,
}

impl RegionMask {
    pub fn new(mask: Array2<bool>) -> Self {
        Self { mask }
    }

    pub fn empty(dim: (usize, usize)) -> Self {
        Self { mask: Array2::from_elem(dim, false) }
    }

    pub fn full(dim: (usize, usize)) -> Self {
        Self { mask: Array2::from_elem(dim, true) }
    }

    /// Thresholds a probability map (`p >= threshold` is foreground).
    pub fn from_probabilities<T: Scalar>(p: &Array2<T>, threshold: T) -> Self {
        Self { mask: p.mapv(|v| v >= threshold) }
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn mask_mut(&mut self) -> &mut Array2<bool> {
        &mut self.mask
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.mask[[r, c]]
    }

    pub fn to_float<T: Scalar>(&self) -> Array2<T> {
        self.mask.mapv(|b| if b { T::one() } else { T::zero() })
    }

    pub fn into_inner(self) -> Array2<bool> {
        self.mask
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut m = self.mask.clone();
        m.invert_axis(Axis(1));
        Self { mask: m.as_standard_layout().to_owned() }
    }

    pub fn union(&self, other: &RegionMask) -> Result<RegionMask> {
        if self.dim() != other.dim() {
            return Err(Error::shape(&[self.dim().0, self.dim().1], &[other.dim().0, other.dim().1]));
        }
        let mut m = self.mask.clone();
        m.zip_mut_with(&other.mask, |a, &b| *a |= b);
        Ok(Self { mask: m })
    }
}

/// Fractional depth-row position per A-line; `EMPTY_ROW` marks columns without a boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCurve<T> {
    rows: Vec<T>,
}

impl<T: Scalar> BoundaryCurve<T> {
    pub fn new(rows: Vec<T>) -> Result<Self> {
        if let Some(bad) = rows.iter().find(|r| !r.is_finite() || (**r < T::zero() && !Self::is_sentinel(**r))) {
            return Err(Error::Data(format!("invalid boundary row {bad}")));
        }
        Ok(Self { rows })
    }

    pub fn constant(width: usize, row: T) -> Self {
        Self { rows: vec![row; width] }
    }

    pub fn sentinel() -> T {
        T::lit(EMPTY_ROW)
    }

    pub fn is_sentinel(row: T) -> bool {
        row == Self::sentinel()
    }

    pub fn rows(&self) -> &[T] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_valid(&self, col: usize) -> bool {
        !Self::is_sentinel(self.rows[col])
    }

    pub fn valid_columns(&self) -> usize {
        self.rows.iter().filter(|&&r| !Self::is_sentinel(r)).count()
    }
}

/// Per-A-line thickness (None for columns without a region) and the mean over valid columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ThicknessProfile<T> {
    pub per_column: Vec<Option<T>>,
    pub mean: T,
}

impl<T: Scalar> ThicknessProfile<T> {
    pub fn from_columns(per_column: Vec<Option<T>>) -> Result<Self> {
        let valid: Vec<T> = per_column.iter().flatten().copied().collect();
        if valid.is_empty() {
            return Err(Error::Precondition("thickness undefined: every column is empty".into()));
        }
        let mean = valid.iter().copied().sum::<T>() / T::from_usize_lossy(valid.len());
        Ok(Self { per_column, mean })
    }

    pub fn valid_columns(&self) -> usize {
        self.per_column.iter().flatten().count()
    }
}

/// Axial projection of a layer band, `(frame, A-line)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnFaceImage<T> {
    pixels: Array2<T>,
}

impl<T: Scalar> EnFaceImage<T> {
    pub fn new(pixels: Array2<T>) -> Result<Self> {
        check_unit_range(pixels.iter())?;
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Array2<T> {
        &self.pixels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn into_pixels(self) -> Array2<T> {
        self.pixels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn volume_rejects_bad_pitch_and_range() {
        let v = Array3::<f64>::zeros((1, 2, 2));
        let mut p = Pitches::default();
        p.axial_um = 0.0;
        assert!(OctVolume::new(v.clone(), p).is_err());
        let mut v2 = v.clone();
        v2[[0, 0, 0]] = 1.5;
        assert!(OctVolume::new(v2, Pitches::default()).is_err());
        assert!(OctVolume::new(Array3::<f64>::zeros((0, 2, 2)), Pitches::default()).is_err());
        assert!(OctVolume::new(v, Pitches::default()).is_ok());
    }

    #[test]
    fn bscan_minimum_size() {
        assert!(BScan::new(Array2::<f32>::zeros((7, 8)), Pitches::default()).is_err());
        assert!(BScan::new(Array2::<f32>::zeros((8, 8)), Pitches::default()).is_ok());
    }

    #[test]
    fn layer_ordering_checker() {
        let ok = LayerMap::new(array![[0u8, 0], [1, 0], [1, 9], [11, 11]]).unwrap();
        assert!(ok.ordering_violations().is_empty());
        let bad = LayerMap::new(array![[0u8, 0], [9, 1], [8, 2], [11, 11]]).unwrap();
        assert_eq!(bad.ordering_violations(), vec![0]);
        assert!(LayerMap::new(array![[12u8]]).is_err());
    }

    #[test]
    fn default_axial_pitch_is_three_mm_over_992() {
        assert!((DEFAULT_AXIAL_PITCH_UM - 3.024_193_548_387_097).abs() < 1e-12);
    }
}
