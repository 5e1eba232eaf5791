use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{generate_bscan, PhantomConfig};
use crate::error::{Error, Result};
use crate::oct::io::{read_image, read_json, read_layer_map, read_mask, write_image, write_json, write_layer_map, write_mask};
use crate::oct::{LayerMap, RegionMask};
use crate::scalar::Scalar;
use crate::seeds;

const STREAM_TRAIN: u64 = 0x0074_7261_696e;
const STREAM_TEST: u64 = 0x7465_7374;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub index: usize,
    pub split: Split,
    pub seed: u64,
}

/// `meta.json` of a generated dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: PhantomConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub samples: Vec<DatasetSample>,
}

impl DatasetManifest {
    /// Seeds for every sample; train and test draw from separate streams.
    pub fn plan(config: &PhantomConfig, n_train: usize, n_test: usize) -> Self {
        let samples = (0..n_train)
            .map(|i| (Split::Train, seeds::derive(config.seed, STREAM_TRAIN, i as u64)))
            .chain((0..n_test).map(|i| (Split::Test, seeds::derive(config.seed, STREAM_TEST, i as u64))))
            .enumerate()
            .map(|(index, (split, seed))| DatasetSample { index, split, seed })
            .collect();
        Self { config: config.clone(), n_train, n_test, samples }
    }

    /// Phantom configuration of a single B-scan sample.
    pub fn sample_config(&self, sample: &DatasetSample) -> PhantomConfig {
        let mut c = self.config.clone();
        c.seed = sample.seed;
        c.frames = 1;
        c
    }
}

/// Writes `bscan_%05d.png`, `layers_%05d.png`, `choroid_%05d.png` and `meta.json`.
pub fn generate_dataset(config: &PhantomConfig, n_train: usize, n_test: usize, out_dir: &Path) -> Result<DatasetManifest> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::config("phantom.n_train", "n_train and n_test must both be at least 1"));
    }
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = DatasetManifest::plan(config, n_train, n_test);
    for s in &manifest.samples {
        let sample = generate_bscan::<f32>(&manifest.sample_config(s), 0)?;
        write_image(&out_dir.join(format!("bscan_{:05}.png", s.index)), sample.bscan.pixels())?;
        write_layer_map(&out_dir.join(format!("layers_{:05}.png", s.index)), &sample.layer_map)?;
        write_mask(&out_dir.join(format!("choroid_{:05}.png", s.index)), &sample.choroid_mask)?;
    }
    write_json(&out_dir.join("meta.json"), &manifest)?;
    Ok(manifest)
}

/// A sample read back from a dataset directory.
#[derive(Debug, Clone)]
pub struct LoadedSample<T> {
    pub meta: DatasetSample,
    pub image: Array2<T>,
    pub layers: LayerMap,
    pub choroid: RegionMask,
}

pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<(DatasetManifest, Vec<LoadedSample<T>>)> {
    let manifest: DatasetManifest = read_json(&dir.join("meta.json"))?;
    let samples = manifest
        .samples
        .iter()
        .map(|s| {
            Ok(LoadedSample {
                meta: s.clone(),
                image: read_image(&dir.join(format!("bscan_{:05}.png", s.index)))?,
                layers: read_layer_map(&dir.join(format!("layers_{:05}.png", s.index)))?,
                choroid: read_mask(&dir.join(format!("choroid_{:05}.png", s.index)))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
