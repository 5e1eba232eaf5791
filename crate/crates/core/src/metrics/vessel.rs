use ndarray::Array2;

use crate::error::{Error, Result};
use crate::imgproc::{box_mean, gaussian_blur, remove_small_components};
use crate::oct::{EnFaceImage, RegionMask};
use crate::scalar::Scalar;

/// Binary vessel map of an en-face image (`true` = vessel).
#[derive(Debug, Clone, PartialEq)]
pub struct VesselMap(pub RegionMask);

impl VesselMap {
    pub fn mask(&self) -> &Array2<bool> {
        self.0.mask()
    }

    pub fn count(&self) -> usize {
        self.0.count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinarizeParams {
    /// Gaussian pre-smoothing; 0 disables it.
    pub smoothing_sigma: f64,
    /// Side of the square averaging window.
    pub window: usize,
    /// A pixel is a vessel when it is below the local mean by more than this.
    pub offset: f64,
    /// Connected components smaller than this are dropped.
    pub min_component: usize,
}

impl Default for BinarizeParams {
    fn default() -> Self {
        Self { smoothing_sigma: 0.7, window: 15, offset: 0.02, min_component: 5 }
    }
}

pub fn binarize_vessels<T: Scalar>(enface: &EnFaceImage<T>) -> VesselMap {
    binarize_vessels_with(enface, BinarizeParams::default())
}

pub fn binarize_vessels_with<T: Scalar>(enface: &EnFaceImage<T>, params: BinarizeParams) -> VesselMap {
    let px = gaussian_blur(&enface.pixels().mapv(|v| v.as_f64()), params.smoothing_sigma);
    let local = box_mean(&px, params.window / 2);
    let raw = Array2::from_shape_fn(px.dim(), |i| px[i] < local[i] - params.offset);
    VesselMap(RegionMask::new(remove_small_components(&raw, params.min_component)))
}

/// Fraction of ROI pixels that are vessel; `None` uses the whole image.
pub fn vessel_density<T: Scalar>(v: &VesselMap, roi: Option<&RegionMask>) -> Result<T> {
    let (hits, total) = match roi {
        None => (v.count(), v.mask().len()),
        Some(roi) => {
            if roi.dim() != v.0.dim() {
                return Err(Error::shape(v.mask().shape(), roi.mask().shape()));
            }
            let hits = v.mask().iter().zip(roi.mask().iter()).filter(|(&a, &b)| a && b).count();
            (hits, roi.count())
        }
    };
    if total == 0 {
        return Err(Error::Precondition("vessel density over an empty region".into()));
    }
    Ok(T::lit(hits as f64 / total as f64))
}
