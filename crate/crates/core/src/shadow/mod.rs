//! Vessel-shadow localization on the en-face RPE image and shadow elimination on the
//! en-face choroid image.

mod deshadow;
mod masks;
mod refine;
mod segmenter;

pub use deshadow::{
    eliminate_shadows, train_deshadow, CollapseGuard, DeshadowConfig, DeshadowModel, GanEpochLog, GanReport, GanWeights, Stage,
    COLLAPSE_LOSS, COLLAPSE_STEPS, DESHADOW_KIND, EDGE_RING_PX, MAX_MASK_FRACTION, PATCH_RECEPTIVE_FIELD,
};
pub use masks::MaskSampler;
pub use refine::{close_mask, edge_map, refine_mask, CLOSING_ITERATIONS, WIDENING_ITERATIONS};
pub use segmenter::{locate_shadows, train_shadow_segmenter, ShadowSample, ShadowSegmenter, SHADOW_SEG_KIND};

/// Binary en-face mask, true where a vessel shadow lies.
pub type ShadowMask = crate::oct::RegionMask;

#[cfg(test)]
mod tests;
