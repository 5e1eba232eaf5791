use crate::imgproc::{canny, dilate_n, erode_n, CannyParams};
use crate::oct::{EnFaceImage, RegionMask};
use crate::scalar::Scalar;

/// Closing iterations that bridge fragmented detections.
pub const CLOSING_ITERATIONS: usize = 6;
/// Extra dilations after closing; each widens a line by 2 px.
pub const WIDENING_ITERATIONS: usize = 3;

/// Morphological closing with a 3x3 cross, bridging gaps up to 12 px.
pub fn close_mask(raw: &RegionMask) -> RegionMask {
    RegionMask::new(erode_n(&dilate_n(raw.mask(), CLOSING_ITERATIONS), CLOSING_ITERATIONS))
}

/// Closing followed by 3 dilations. The result always contains the input.
pub fn refine_mask(raw: &RegionMask) -> RegionMask {
    RegionMask::new(dilate_n(close_mask(raw).mask(), WIDENING_ITERATIONS))
}

/// Binary Canny edges with the default parameters.
pub fn edge_map<T: Scalar>(image: &EnFaceImage<T>) -> RegionMask {
    RegionMask::new(canny(image.pixels(), CannyParams::default()))
}
