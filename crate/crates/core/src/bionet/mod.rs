//! Biomarker-constrained choroid segmentation.

mod biomarker;
pub mod losses;
mod model;
mod unet;

pub use biomarker::{shift_boundaries, train_biomarker_net, BIOMARKER_LR, JITTER_ROWS, BiomarkerConfig, BiomarkerNet, BiomarkerReport, MaskSample, BIOMARKER_KIND, BIO_CONVERGENCE_PX};
pub use losses::{
    bio_consistency_loss, bio_reference, bio_regression_loss, choroid_loss, multilayer_loss, one_hot, total_loss, total_loss_var,
    LossWeights, CE_EPS,
};
pub use model::{
    segment_choroid, train_bionet, variant_slug, BioNet, BioNetConfig, GlobalSegmenter, LocalSegmenter, Outputs, SegSample, Segmentation,
    Variant, BIONET_KIND, MIN_SIGNAL_RANGE,
};
pub use unet::{UNet, UNetConfig};

#[cfg(test)]
mod tests;
