//! Training data: generated on the fly from phantoms, or read from dataset directories.

use std::fs;
use std::path::Path;

use choroid::bionet::{MaskSample, SegSample};
use choroid::enface::enface_pair;
use choroid::oct::io::{read_enface, read_json, read_mask, write_enface, write_json, write_mask};
use choroid::oct::{EnFaceImage, RegionMask};
use choroid::phantom::{generate_bscan, generate_volume, load_dataset, DatasetManifest, DatasetSample, PhantomConfig, PhantomSample, Split};
use choroid::shadow::ShadowSample;
use choroid::{Error, Result};
use ndarray::Array2;

/// Training and test phantoms.
pub type PhantomSplit = (Vec<PhantomSample<f32>>, Vec<PhantomSample<f32>>);

/// Single B-scan phantoms planned exactly as a generated dataset directory would be.
pub fn bscan_phantoms(base: &PhantomConfig, n_train: usize, n_test: usize) -> Result<PhantomSplit> {
    base.validate()?;
    let plan = DatasetManifest::plan(base, n_train, n_test);
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    for s in &plan.samples {
        let sample = generate_bscan(&plan.sample_config(s), 0)?;
        match s.split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    Ok((train, test))
}

pub fn seg_sample(s: &PhantomSample<f32>) -> Result<SegSample<f32>> {
    SegSample::new(s.bscan.pixels().clone(), &s.layer_map, &s.choroid_mask)
}

pub fn mask_sample(s: &PhantomSample<f32>) -> MaskSample<f32> {
    MaskSample::from_mask(&s.choroid_mask)
}

/// Segmentation samples from a directory written by the `phantom` command.
pub fn load_seg_samples(dir: &Path, split: Split) -> Result<Vec<SegSample<f32>>> {
    let (_, samples) = load_dataset::<f32>(dir)?;
    samples
        .into_iter()
        .filter(|s| s.meta.split == split)
        .map(|s| SegSample::new(s.image, &s.layers, &s.choroid))
        .collect()
}

/// One en-face phantom: normalized RPE image, raw and clean choroid projections, shadow mask.
#[derive(Debug, Clone)]
pub struct EnFaceRecord {
    pub meta: DatasetSample,
    pub rpe: EnFaceImage<f32>,
    pub choroid: EnFaceImage<f32>,
    pub clean: EnFaceImage<f32>,
    pub shadow: RegionMask,
}

impl EnFaceRecord {
    pub fn shadow_sample(&self) -> Result<ShadowSample<f32>> {
        ShadowSample::new(&self.rpe, &self.shadow)
    }
}

/// Builds the en-face record of one phantom volume from its ground-truth segmentation.
pub fn enface_record(config: &PhantomConfig, meta: DatasetSample) -> Result<EnFaceRecord> {
    let phantom = generate_volume::<f32>(&config.clone().with_seed(meta.seed))?;
    let pair = enface_pair(&phantom.volume, &phantom.choroid_masks())?;
    let truth = phantom.enface_truth()?;
    Ok(EnFaceRecord { meta, rpe: pair.rpe, choroid: truth.choroid, clean: truth.clean_choroid, shadow: truth.shadow_mask })
}

/// En-face phantoms with seeds planned like a B-scan dataset.
pub fn enface_phantoms(base: &PhantomConfig, n_train: usize, n_test: usize) -> Result<Vec<EnFaceRecord>> {
    base.validate()?;
    let plan = DatasetManifest::plan(base, n_train, n_test);
    plan.samples.into_iter().map(|s| enface_record(base, s)).collect()
}

pub fn split(records: &[EnFaceRecord], which: Split) -> Vec<&EnFaceRecord> {
    records.iter().filter(|r| r.meta.split == which).collect()
}

fn file(dir: &Path, kind: &str, index: usize) -> std::path::PathBuf {
    dir.join(format!("{kind}_{index:05}.png"))
}

/// Writes `rpe_*.png`, `choroid_*.png`, `clean_*.png`, `shadow_*.png` and `meta.json`.
pub fn write_enface_dataset(base: &PhantomConfig, n_train: usize, n_test: usize, dir: &Path) -> Result<DatasetManifest> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::config("n_train", "n_train and n_test must both be at least 1"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let plan = DatasetManifest::plan(base, n_train, n_test);
    for s in &plan.samples {
        let r = enface_record(base, s.clone())?;
        write_enface(&file(dir, "rpe", s.index), &r.rpe)?;
        write_enface(&file(dir, "choroid", s.index), &r.choroid)?;
        write_enface(&file(dir, "clean", s.index), &r.clean)?;
        write_mask(&file(dir, "shadow", s.index), &r.shadow)?;
    }
    write_json(&dir.join("meta.json"), &plan)?;
    Ok(plan)
}

pub fn read_enface_dataset(dir: &Path) -> Result<Vec<EnFaceRecord>> {
    let plan: DatasetManifest = read_json(&dir.join("meta.json"))?;
    plan.samples
        .into_iter()
        .map(|s| {
            let i = s.index;
            Ok(EnFaceRecord {
                rpe: read_enface(&file(dir, "rpe", i))?,
                choroid: read_enface(&file(dir, "choroid", i))?,
                clean: read_enface(&file(dir, "clean", i))?,
                shadow: read_mask(&file(dir, "shadow", i))?,
                meta: s,
            })
        })
        .collect()
}

/// The choroid image with shadowed pixels set to zero.
pub fn zero_filled(image: &EnFaceImage<f32>, mask: &RegionMask) -> Array2<f32> {
    Array2::from_shape_fn(image.dim(), |ix| if mask.mask()[ix] { 0.0 } else { image.pixels()[ix] })
}
