//! Score tables for segmentation and inpainting, written as CSV.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use choroid::metrics::{binarize_vessels, choroid_scores, image_fidelity, vessel_density};
use choroid::oct::io::read_mask;
use choroid::oct::{EnFaceImage, RegionMask};
use choroid::shadow::{eliminate_shadows, DeshadowModel};
use choroid::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::datasets::{zero_filled, EnFaceRecord};

/// One row of `scores.csv`. Boundary errors are NaN when either mask is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample: String,
    pub di: f64,
    pub iou: f64,
    pub ausde_bm: f64,
    pub ausde_csi: f64,
    pub acc: f64,
    pub sen: f64,
}

impl ScoreRow {
    pub fn new(sample: impl Into<String>, pred: &RegionMask, gt: &RegionMask) -> Result<Self> {
        let s = choroid_scores::<f64>(pred, gt)?;
        let (bm, csi) = s.boundaries.map_or((f64::NAN, f64::NAN), |b| (b.bm.mean, b.csi.mean));
        Ok(Self { sample: sample.into(), di: s.di, iou: s.iou, ausde_bm: bm, ausde_csi: csi, acc: s.acc, sen: s.sen })
    }

    /// Mean of the two boundary errors.
    pub fn ausde(&self) -> f64 {
        0.5 * (self.ausde_bm + self.ausde_csi)
    }
}

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn png_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "png") {
            let name = path.file_name().expect("file name").to_string_lossy().into_owned();
            out.insert(name, path);
        }
    }
    Ok(out)
}

/// Scores every mask in `pred` against the same-named mask in `gt`.
/// Both arguments may also be single PNG files.
pub fn evaluate_seg(pred: &Path, gt: &Path) -> Result<Vec<ScoreRow>> {
    if pred.is_file() && gt.is_file() {
        let name = pred.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        return Ok(vec![ScoreRow::new(name, &read_mask(pred)?, &read_mask(gt)?)?]);
    }
    let preds = png_files(pred)?;
    let gts = png_files(gt)?;
    let rows = preds
        .iter()
        .filter_map(|(name, p)| gts.get(name).map(|g| (name, p, g)))
        .map(|(name, p, g)| ScoreRow::new(name.trim_end_matches(".png"), &read_mask(p)?, &read_mask(g)?))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::Data(format!("no mask in {} has a same-named ground truth in {}", pred.display(), gt.display())));
    }
    Ok(rows)
}

/// Vessel densities of one en-face image before and after shadow removal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VesselDensities {
    pub original: f64,
    pub deshadowed: f64,
    /// Original image with the shadow mask removed from the region of interest.
    pub shadow_excluded: f64,
}

impl VesselDensities {
    /// `valid` restricts all three densities (e.g. to columns with a segmented choroid).
    pub fn measure(original: &EnFaceImage<f32>, deshadowed: &EnFaceImage<f32>, shadow: &RegionMask, valid: Option<&RegionMask>) -> Result<Self> {
        let valid = valid.cloned().unwrap_or_else(|| RegionMask::full(original.dim()));
        let excluded = RegionMask::new(ndarray::Zip::from(valid.mask()).and(shadow.mask()).map_collect(|&v, &s| v && !s));
        let vo = binarize_vessels(original);
        Ok(Self {
            original: vessel_density(&vo, Some(&valid))?,
            deshadowed: vessel_density(&binarize_vessels(deshadowed), Some(&valid))?,
            shadow_excluded: vessel_density(&vo, Some(&excluded))?,
        })
    }
}

/// One row of `fidelity.csv`: deshadowed and zero-filled images, each against the clean choroid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub sample: String,
    pub shadow_fraction: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub mse: f64,
    pub masked_ssim: f64,
    pub masked_psnr: f64,
    pub masked_mse: f64,
    pub vd_original: f64,
    pub vd_deshadowed: f64,
    pub vd_excluded: f64,
}

/// Inpaints each record's shadows with its ground-truth mask and scores the result.
pub fn evaluate_inpaint(records: &[&EnFaceRecord], model: &DeshadowModel<f32>) -> Result<Vec<FidelityRow>> {
    records
        .iter()
        .map(|r| {
            let out = eliminate_shadows(&r.choroid, &r.shadow, model)?;
            let clean = r.clean.pixels().mapv(f64::from);
            let f = image_fidelity(&out.pixels().mapv(f64::from), &clean)?;
            let m = image_fidelity(&zero_filled(&r.choroid, &r.shadow).mapv(f64::from), &clean)?;
            let vd = VesselDensities::measure(&r.choroid, &out, &r.shadow, None)?;
            let (h, w) = r.shadow.dim();
            Ok(FidelityRow {
                sample: format!("{:05}", r.meta.index),
                shadow_fraction: r.shadow.count() as f64 / (h * w) as f64,
                ssim: f.ssim,
                psnr: f.psnr,
                mse: f.mse,
                masked_ssim: m.ssim,
                masked_psnr: m.psnr,
                masked_mse: m.mse,
                vd_original: vd.original,
                vd_deshadowed: vd.deshadowed,
                vd_excluded: vd.shadow_excluded,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use choroid::oct::io::write_mask;
    use ndarray::Array2;

    fn band(rows: std::ops::Range<usize>) -> RegionMask {
        RegionMask::new(Array2::from_shape_fn((12, 8), |(r, _)| rows.contains(&r)))
    }

    #[test]
    fn shifted_band_scores() {
        let row = ScoreRow::new("a", &band(4..8), &band(5..9)).unwrap();
        assert_eq!((row.ausde_bm, row.ausde_csi, row.ausde()), (1.0, 1.0, 1.0));
        assert!((row.di - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_prediction_has_nan_boundaries() {
        let row = ScoreRow::new("a", &RegionMask::empty((12, 8)), &band(5..9)).unwrap();
        assert_eq!(row.di, 0.0);
        assert!(row.ausde_bm.is_nan() && row.ausde().is_nan());
    }

    #[test]
    fn directories_pair_masks_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let (p, g) = (dir.path().join("pred"), dir.path().join("gt"));
        write_mask(&p.join("x.png"), &band(4..8)).unwrap();
        write_mask(&p.join("unpaired.png"), &band(4..8)).unwrap();
        write_mask(&g.join("x.png"), &band(4..8)).unwrap();
        let rows = evaluate_seg(&p, &g).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].sample.as_str(), rows[0].di), ("x", 1.0));
        assert!(matches!(evaluate_seg(&g, &dir.path().join("none")), Err(Error::Io { .. })));
    }

    #[test]
    fn csv_has_one_header_and_row_per_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/scores.csv");
        let row = ScoreRow::new("a", &band(4..8), &band(4..8)).unwrap();
        write_csv(&path, &[row.clone(), row]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "sample,di,iou,ausde_bm,ausde_csi,acc,sen");
        assert_eq!(text.lines().count(), 3);
    }
}
