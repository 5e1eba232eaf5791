//! Segmentation, vessel-density and image-fidelity metrics.

mod fidelity;
mod seg;
mod vessel;

pub use fidelity::{image_fidelity, Fidelity, PSNR_CAP_DB};
pub use seg::{ausde, choroid_scores, envelope_boundaries, roc_auc, seg_scores, Ausde, BoundaryErrors, SegScores};
pub use vessel::{binarize_vessels, binarize_vessels_with, vessel_density, BinarizeParams, VesselMap};
