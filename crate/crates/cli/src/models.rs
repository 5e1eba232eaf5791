//! Load-or-train for every model stage, with checkpoint hashing for manifests.

use std::fs;
use std::path::{Path, PathBuf};

use choroid::bionet::{train_biomarker_net, train_bionet, BioNet, BioNetConfig, BiomarkerConfig, BiomarkerNet, MaskSample, SegSample, UNetConfig};
use choroid::seeds;
use choroid::shadow::{DeshadowConfig, DeshadowModel, ShadowSample, ShadowSegmenter, Stage};
use choroid::training::TrainConfig;
use choroid::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::StageSection;

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Trained,
    Loaded,
}

/// Where a model came from and the hash of its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub source: Source,
    /// Training seed; absent for loaded checkpoints.
    pub seed: Option<u64>,
    /// Absent when a trained model was kept in memory only.
    pub checkpoint: Option<PathBuf>,
    pub sha256: Option<String>,
}

impl ModelRecord {
    fn loaded(path: &Path) -> Result<Self> {
        Ok(Self { source: Source::Loaded, seed: None, checkpoint: Some(path.to_path_buf()), sha256: Some(sha256_file(path)?) })
    }

    fn trained(path: Option<&Path>, seed: u64) -> Result<Self> {
        let sha256 = path.map(sha256_file).transpose()?;
        Ok(Self { source: Source::Trained, seed: Some(seed), checkpoint: path.map(Path::to_path_buf), sha256 })
    }
}

/// Training config for stage `name` with its seed mixed into the run's master seed.
pub fn stage_train(train: &TrainConfig, master: u64, name: &str) -> TrainConfig {
    TrainConfig { seed: seeds::derive(seeds::stage(master, name), train.seed, 0), ..train.clone() }
}

fn write_log(dir: Option<&Path>, name: &str, csv: &str) -> Result<()> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{name}_log.csv"));
        fs::write(&path, csv).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Optional output locations for a stage: checkpoint file and log directory.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sink<'a> {
    pub checkpoint: Option<&'a Path>,
    pub logs: Option<&'a Path>,
}

impl Sink<'_> {
    fn save(&self, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        self.checkpoint.map_or(Ok(()), f)
    }
}

pub fn biomarker(
    section: &StageSection<BiomarkerConfig>,
    master: u64,
    data: impl FnOnce() -> Result<Vec<MaskSample<f32>>>,
    sink: Sink,
) -> Result<(BiomarkerNet<f32>, ModelRecord)> {
    if let Some(path) = &section.checkpoint {
        return Ok((BiomarkerNet::load(path)?, ModelRecord::loaded(path)?));
    }
    let train = stage_train(&section.train, master, "biomarker");
    let (net, report) = train_biomarker_net(&data()?, section.model, &train)?;
    log::info!("biomarker net: validation error {:.2} px", report.val_mae_px);
    sink.save(|p| net.save(p, report.train.best_epoch.unwrap_or(0)))?;
    write_log(sink.logs, "biomarker", &report.train.csv())?;
    Ok((net, ModelRecord::trained(sink.checkpoint, train.seed)?))
}

pub fn bionet(
    section: &StageSection<BioNetConfig>,
    master: u64,
    bio: Option<&BiomarkerNet<f32>>,
    data: impl FnOnce() -> Result<Vec<SegSample<f32>>>,
    sink: Sink,
) -> Result<(BioNet<f32>, ModelRecord)> {
    if let Some(path) = &section.checkpoint {
        return Ok((BioNet::load(path)?, ModelRecord::loaded(path)?));
    }
    let train = stage_train(&section.train, master, "bionet");
    let (model, report) = train_bionet(&data()?, bio, &section.model, &train)?;
    log::info!("{}: best epoch {:?}, validation loss {:.4}", section.model.variant.name(), report.best_epoch, report.best_val_loss);
    sink.save(|p| model.save(p, report.best_epoch.unwrap_or(0)))?;
    write_log(sink.logs, "bionet", &report.csv())?;
    Ok((model, ModelRecord::trained(sink.checkpoint, train.seed)?))
}

pub fn shadow_segmenter(
    section: &StageSection<UNetConfig>,
    master: u64,
    data: impl FnOnce() -> Result<Vec<ShadowSample<f32>>>,
    sink: Sink,
) -> Result<(ShadowSegmenter<f32>, ModelRecord)> {
    if let Some(path) = &section.checkpoint {
        return Ok((ShadowSegmenter::load(path)?, ModelRecord::loaded(path)?));
    }
    let train = stage_train(&section.train, master, "shadow_seg");
    let (model, report) = choroid::shadow::train_shadow_segmenter(&data()?, section.model, &train)?;
    sink.save(|p| model.save(p, report.epochs.len()))?;
    write_log(sink.logs, "shadow_seg", &report.csv())?;
    Ok((model, ModelRecord::trained(sink.checkpoint, train.seed)?))
}

/// Trains `stages` in order, starting from `init` when given (a checkpoint from earlier stages).
pub fn deshadow_stages(
    config: &DeshadowConfig,
    init: Option<&Path>,
    stages: &[Stage],
    train: &TrainConfig,
    textures: &[Array2<f32>],
    sink: Sink,
) -> Result<DeshadowModel<f32>> {
    let mut model = match init {
        Some(path) => DeshadowModel::load(path)?,
        None => DeshadowModel::new(*config, seeds::derive(train.seed, 0x6465_7368, 0))?,
    };
    for &stage in stages {
        let report = model.train_stage(stage, textures, train)?;
        write_log(sink.logs, &format!("deshadow_{stage}"), &report.csv())?;
    }
    sink.save(|p| model.save(p, train.max_epochs))?;
    Ok(model)
}

pub fn deshadow(
    section: &StageSection<DeshadowConfig>,
    master: u64,
    data: impl FnOnce() -> Result<Vec<Array2<f32>>>,
    sink: Sink,
) -> Result<(DeshadowModel<f32>, ModelRecord)> {
    if let Some(path) = &section.checkpoint {
        return Ok((DeshadowModel::load(path)?, ModelRecord::loaded(path)?));
    }
    let train = stage_train(&section.train, master, "deshadow");
    let model = deshadow_stages(&section.model, None, &Stage::ALL, &train, &data()?, sink)?;
    Ok((model, ModelRecord::trained(sink.checkpoint, train.seed)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_are_stable_and_distinct() {
        let t = TrainConfig::default();
        assert_eq!(stage_train(&t, 3, "bionet").seed, stage_train(&t, 3, "bionet").seed);
        assert_ne!(stage_train(&t, 3, "bionet").seed, stage_train(&t, 3, "biomarker").seed);
        assert_ne!(stage_train(&t, 3, "bionet").seed, stage_train(&t, 4, "bionet").seed);
        assert_eq!(stage_train(&t, 3, "bionet").max_epochs, t.max_epochs);
    }

    #[test]
    fn sha256_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abc");
        fs::write(&path, b"abc").unwrap();
        assert_eq!(sha256_file(&path).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
