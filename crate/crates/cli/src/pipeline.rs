//! End-to-end run: segmentation, en-face projection, shadow localization, shadow removal
//! and vessel density, recorded in a manifest that reproduces the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use choroid::bionet::{segment_choroid, BioNet};
use choroid::enface::enface_pair;
use choroid::metrics::binarize_vessels;
use choroid::oct::io::{load_volume, write_enface, write_layer_map, write_mask};
use choroid::oct::{OctVolume, RegionMask};
use choroid::phantom::{generate_volume, PhantomVolume};
use choroid::seeds;
use choroid::shadow::{eliminate_shadows, locate_shadows};
use choroid::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{parse_toml, read_text, PipelineConfig};
use crate::datasets::{bscan_phantoms, enface_phantoms, mask_sample, seg_sample};
use crate::eval::{write_csv, ScoreRow, VesselDensities};
use crate::models::{self, sha256_file, ModelRecord, Sink};

pub const TOOL: &str = "choroid";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: PipelineConfig,
    /// Seeds of every generated dataset and trained model.
    pub seeds: BTreeMap<String, u64>,
    pub models: BTreeMap<String, ModelRecord>,
    /// SHA-256 of every output file, keyed by path relative to the output directory.
    pub outputs: BTreeMap<String, String>,
}

/// Reads a pipeline config from TOML, or from a previous run's `manifest.json`.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = read_text(path)?;
    let config = if path.extension().is_some_and(|e| e == "json") {
        let de = &mut serde_json::Deserializer::from_str(&text);
        let m: Manifest = serde_path_to_error::deserialize(de).map_err(|e| Error::config(e.path().to_string(), e.into_inner().to_string()))?;
        m.config
    } else {
        parse_toml(&text, &path.display().to_string())?
    };
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct ThicknessRow {
    pub frame: usize,
    pub mean_thickness_um: f64,
    pub valid_columns: usize,
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub manifest: Manifest,
    pub vessel_density: VesselDensities,
    /// Per-frame scores against the phantom truth, when the input was generated.
    pub scores: Option<Vec<ScoreRow>>,
}

struct Outputs<'a> {
    root: &'a Path,
    files: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.files.push(rel.into());
        Ok(p)
    }

    fn hashes(&self) -> Result<BTreeMap<String, String>> {
        self.files.iter().map(|rel| Ok((rel.to_string_lossy().replace('\\', "/"), sha256_file(&self.root.join(rel))?))).collect()
    }
}

fn segment_volume(volume: &OctVolume<f32>, model: &BioNet<f32>, out: &mut Outputs) -> Result<Vec<RegionMask>> {
    let mut masks = Vec::with_capacity(volume.frames());
    let mut thickness = Vec::with_capacity(volume.frames());
    for f in 0..volume.frames() {
        let seg = segment_choroid(&volume.bscan(f)?, model)?;
        if seg.empty {
            log::warn!("frame {f}: no choroid segmented");
        }
        write_mask(&out.path(&format!("segmentation/choroid_{f:05}.png"))?, &seg.choroid)?;
        if let Some(layers) = &seg.layers {
            write_layer_map(&out.path(&format!("segmentation/layers_{f:05}.png"))?, layers)?;
        }
        let (mean, valid) = match &seg.thickness {
            Some(t) => (f64::from(t.mean), t.valid_columns()),
            None => (f64::NAN, 0),
        };
        thickness.push(ThicknessRow { frame: f, mean_thickness_um: mean, valid_columns: valid });
        masks.push(seg.choroid);
    }
    write_csv(&out.path("thickness.csv")?, &thickness)?;
    Ok(masks)
}

/// Runs every stage and writes all artifacts plus `manifest.json` under `out_dir`.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<PipelineRun> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let start = Instant::now();
    let master = config.run.seed;
    let mut out = Outputs { root: out_dir, files: Vec::new() };
    let mut seeds_used = BTreeMap::new();
    let mut records = BTreeMap::new();
    let ckpt_dir = out_dir.join("checkpoints");
    let log_dir = out_dir.join("logs");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;

    let (volume, phantom): (OctVolume<f32>, Option<PhantomVolume<f32>>) = match &config.input.volume {
        Some(path) => (load_volume(path)?, None),
        None => {
            seeds_used.insert("input_phantom".into(), config.input.phantom.seed);
            let p = generate_volume(&config.input.phantom)?;
            (p.volume.clone(), Some(p))
        }
    };

    let bscan_seed = seeds::stage(master, "bscan-data");
    let enface_seed = seeds::stage(master, "enface-data");
    let bscan_base = config.training_phantom.clone().with_seed(bscan_seed);
    let enface_base = config.training_phantom.clone().with_seed(enface_seed);

    let bio = if config.bionet.model.variant.uses_bio() && config.bionet.checkpoint.is_none() {
        seeds_used.insert("bscan_data".into(), bscan_seed);
        let sink = Sink { checkpoint: Some(&ckpt_dir.join("biomarker.ckpt")), logs: Some(&log_dir) };
        let data = || Ok(bscan_phantoms(&bscan_base, config.biomarker.n_train, 0)?.0.iter().map(mask_sample).collect());
        let (net, rec) = models::biomarker(&config.biomarker, master, data, sink)?;
        records.insert("biomarker".to_string(), rec);
        Some(net)
    } else {
        None
    };
    let sink = Sink { checkpoint: Some(&ckpt_dir.join("bionet.ckpt")), logs: Some(&log_dir) };
    let data = || {
        seeds_used.insert("bscan_data".into(), bscan_seed);
        bscan_phantoms(&bscan_base, config.bionet.n_train, 0)?.0.iter().map(seg_sample).collect()
    };
    let (bionet, rec) = models::bionet(&config.bionet, master, bio.as_ref(), data, sink)?;
    records.insert("bionet".into(), rec);

    let needs_enface = config.shadow_seg.checkpoint.is_none() || config.deshadow.checkpoint.is_none();
    let n_enface = config.shadow_seg.n_train.max(config.deshadow.n_train);
    let enface_data = if needs_enface {
        seeds_used.insert("enface_data".into(), enface_seed);
        enface_phantoms(&enface_base, n_enface, 0)?
    } else {
        Vec::new()
    };
    let sink = Sink { checkpoint: Some(&ckpt_dir.join("shadow_seg.ckpt")), logs: Some(&log_dir) };
    let data = || enface_data.iter().take(config.shadow_seg.n_train).map(|r| r.shadow_sample()).collect();
    let (segmenter, rec) = models::shadow_segmenter(&config.shadow_seg, master, data, sink)?;
    records.insert("shadow_seg".into(), rec);
    let sink = Sink { checkpoint: Some(&ckpt_dir.join("deshadow.ckpt")), logs: Some(&log_dir) };
    let data = || Ok(enface_data.iter().take(config.deshadow.n_train).map(|r| r.clean.pixels().clone()).collect());
    let (deshadow, rec) = models::deshadow(&config.deshadow, master, data, sink)?;
    records.insert("deshadow".into(), rec);
    for (name, r) in records.iter_mut() {
        // Relative paths keep manifests of identical runs identical.
        if let Some(rel) = r.checkpoint.as_ref().and_then(|c| c.strip_prefix(out_dir).ok()) {
            r.checkpoint = Some(rel.to_path_buf());
        }
        if let Some(s) = r.seed {
            seeds_used.insert(name.clone(), s);
        }
    }
    log::info!("models ready after {:.1}s", start.elapsed().as_secs_f64());

    let masks = segment_volume(&volume, &bionet, &mut out)?;
    let scores = match &phantom {
        Some(p) => {
            let rows = masks
                .iter()
                .zip(&p.samples)
                .enumerate()
                .map(|(f, (pred, truth))| ScoreRow::new(format!("{f:05}"), pred, &truth.choroid_mask))
                .collect::<Result<Vec<_>>>()?;
            write_csv(&out.path("scores.csv")?, &rows)?;
            Some(rows)
        }
        None => None,
    };

    let pair = enface_pair(&volume, &masks)?;
    write_enface(&out.path("enface/rpe.png")?, &pair.rpe)?;
    write_enface(&out.path("enface/choroid.png")?, &pair.choroid)?;
    write_mask(&out.path("enface/empty_columns.png")?, &pair.empty)?;
    let shadow = locate_shadows(&pair.rpe, &segmenter)?;
    write_mask(&out.path("enface/shadow_mask.png")?, &shadow)?;
    let deshadowed = eliminate_shadows(&pair.choroid, &shadow, &deshadow)?;
    write_enface(&out.path("enface/deshadowed_choroid.png")?, &deshadowed)?;
    write_mask(&out.path("vessels/original.png")?, &binarize_vessels(&pair.choroid).0)?;
    write_mask(&out.path("vessels/deshadowed.png")?, &binarize_vessels(&deshadowed).0)?;

    let valid = RegionMask::new(pair.empty.mask().mapv(|e| !e));
    let vd = VesselDensities::measure(&pair.choroid, &deshadowed, &shadow, Some(&valid))?;
    fs::write(out.path("vessel_density.json")?, serde_json::to_string_pretty(&vd).expect("plain struct"))
        .map_err(|e| Error::io(out_dir.join("vessel_density.json"), e))?;
    log::info!("VD original {:.4}, deshadowed {:.4}, shadow-excluded {:.4}", vd.original, vd.deshadowed, vd.shadow_excluded);

    let manifest = Manifest {
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        seeds: seeds_used,
        models: records,
        outputs: out.hashes()?,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = out_dir.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(|e| Error::io(mpath, e))?;
    log::info!("pipeline finished in {:.1}s", start.elapsed().as_secs_f64());
    Ok(PipelineRun { manifest, vessel_density: vd, scores })
}
