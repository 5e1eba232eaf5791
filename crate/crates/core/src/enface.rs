//! En-face projection of segmented volumes.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::metrics::envelope_boundaries;
use crate::oct::{BoundaryCurve, EnFaceImage, OctVolume, RegionMask};
use crate::scalar::Scalar;

/// Height of the RPE band above the choroid, in micrometres.
pub const RPE_BAND_UM: f64 = 20.0;

/// Rows `[upper, lower)` of one B-scan to average per A-line.
#[derive(Debug, Clone, PartialEq)]
pub struct Band<T> {
    pub upper: BoundaryCurve<T>,
    pub lower: BoundaryCurve<T>,
}

/// A projection plus the `(frame, A-line)` positions whose band was empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T> {
    pub image: EnFaceImage<T>,
    pub empty: RegionMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnFacePair<T> {
    pub rpe: EnFaceImage<T>,
    pub choroid: EnFaceImage<T>,
    /// Columns where the choroid segmentation was empty.
    pub empty: RegionMask,
}

pub fn rpe_shift_px(axial_pitch_um: f64) -> usize {
    (RPE_BAND_UM / axial_pitch_um).round().max(0.0) as usize
}

/// The band `[upper - shift, upper)` above the choroid, clamped at row 0.
pub fn derive_rpe_band<T: Scalar>(choroid_upper: &BoundaryCurve<T>, axial_pitch_um: f64) -> Band<T> {
    let shift = T::from_usize_lossy(rpe_shift_px(axial_pitch_um));
    let upper = choroid_upper
        .rows()
        .iter()
        .map(|&u| if BoundaryCurve::is_sentinel(u) { u } else { (u - shift).max(T::zero()) })
        .collect();
    let upper = BoundaryCurve::new(upper).expect("shifted rows are non-negative or sentinel");
    Band { upper, lower: choroid_upper.clone() }
}

/// The band spanned by a choroid mask in each column.
pub fn choroid_band<T: Scalar>(mask: &RegionMask) -> Result<Band<T>> {
    let (upper, lower) = envelope_boundaries(mask)?;
    Ok(Band { upper, lower })
}

fn row_index<T: Scalar>(row: T, depth: usize) -> usize {
    (row.as_f64().round().max(0.0) as usize).min(depth)
}

/// Mean of the voxels in each band; empty bands project to 0 and are flagged.
pub fn project_mean<T: Scalar>(volume: &OctVolume<T>, bands: &[Band<T>]) -> Result<Projection<T>> {
    let (frames, depth, alines) = (volume.frames(), volume.depth(), volume.alines());
    if bands.len() != frames {
        return Err(Error::shape(&[frames], &[bands.len()]));
    }
    let mut image = Array2::zeros((frames, alines));
    let mut empty = Array2::from_elem((frames, alines), false);
    for (f, band) in bands.iter().enumerate() {
        if band.upper.len() != alines || band.lower.len() != alines {
            return Err(Error::shape(&[alines, alines], &[band.upper.len(), band.lower.len()]));
        }
        let bscan = volume.frame(f);
        for a in 0..alines {
            let (u, l) = (band.upper.rows()[a], band.lower.rows()[a]);
            if BoundaryCurve::is_sentinel(u) || BoundaryCurve::is_sentinel(l) {
                empty[[f, a]] = true;
                continue;
            }
            let (r0, r1) = (row_index(u, depth), row_index(l, depth));
            if r1 <= r0 {
                empty[[f, a]] = true;
                continue;
            }
            let sum: T = (r0..r1).map(|r| bscan[[r, a]]).sum();
            image[[f, a]] = sum / T::from_usize_lossy(r1 - r0);
        }
    }
    Ok(Projection { image: EnFaceImage::new(image)?, empty: RegionMask::new(empty) })
}

/// Min-max normalizes the non-flagged pixels to `[0, 1]`; flagged pixels become 0.
pub fn normalize<T: Scalar>(image: &EnFaceImage<T>, flagged: &RegionMask) -> EnFaceImage<T> {
    let px = image.pixels();
    let valid = || px.iter().zip(flagged.mask().iter()).filter(|(_, &e)| !e).map(|(&v, _)| v);
    let lo = valid().fold(T::infinity(), |a, v| a.min(v));
    let hi = valid().fold(T::neg_infinity(), |a, v| a.max(v));
    let span = hi - lo;
    let out = Array2::from_shape_fn(px.dim(), |idx| {
        if flagged.mask()[idx] || !(span > T::zero()) {
            T::zero()
        } else {
            ((px[idx] - lo) / span).max(T::zero()).min(T::one())
        }
    });
    EnFaceImage::new(out).expect("normalized values lie in [0, 1]")
}

/// Normalized en-face RPE and choroid images from per-frame choroid masks.
pub fn enface_pair<T: Scalar>(volume: &OctVolume<T>, masks: &[RegionMask]) -> Result<EnFacePair<T>> {
    if masks.len() != volume.frames() {
        return Err(Error::shape(&[volume.frames()], &[masks.len()]));
    }
    let choroid_bands = masks.iter().map(choroid_band).collect::<Result<Vec<Band<T>>>>()?;
    let pitch = volume.pitches().axial_um;
    let rpe_bands: Vec<Band<T>> = choroid_bands.iter().map(|b| derive_rpe_band(&b.upper, pitch)).collect();
    let rpe = project_mean(volume, &rpe_bands)?;
    let choroid = project_mean(volume, &choroid_bands)?;
    let empty = choroid.empty.union(&rpe.empty)?;
    Ok(EnFacePair { rpe: normalize(&rpe.image, &empty), choroid: normalize(&choroid.image, &empty), empty })
}
