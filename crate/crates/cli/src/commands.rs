//! Implementations of the individual command-line verbs.

use std::fs;
use std::path::Path;

use choroid::bionet::{segment_choroid, BioNet, BiomarkerNet, Variant};
use choroid::enface::enface_pair;
use choroid::oct::io::{load_volume, read_enface, read_image, read_mask, save_volume, write_enface, write_layer_map, write_mask};
use choroid::oct::{BScan, Pitches, RegionMask};
use choroid::phantom::{generate_dataset, generate_volume, PhantomConfig, Split};
use choroid::shadow::{eliminate_shadows, locate_shadows, DeshadowModel, ShadowSegmenter, Stage};
use choroid::{Error, Result};

use crate::config::{load_toml, AblationConfig, PipelineConfig};
use crate::datasets::{self, bscan_phantoms, enface_phantoms, mask_sample, read_enface_dataset, seg_sample};
use crate::eval::{self, write_csv};
use crate::models::{self, stage_train, Sink};
use crate::pipeline::ThicknessRow;
use crate::{ablation as suite, pipeline as pipe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PhantomKind {
    /// Single B-scans with layer and choroid labels.
    Bscan,
    /// En-face RPE, choroid, clean choroid and shadow masks.
    Enface,
    /// One volume (raw bytes plus JSON sidecar) with per-frame truth.
    Volume,
}

fn pipeline_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => pipe::load_config(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn data_base(config: &PipelineConfig, stream: &str) -> PhantomConfig {
    config.training_phantom.clone().with_seed(choroid::seeds::stage(config.run.seed, stream))
}

pub fn phantom(out: &Path, kind: PhantomKind, config: Option<&Path>, seed: Option<u64>, n_train: usize, n_test: usize) -> Result<()> {
    let mut c = match config {
        Some(p) => load_toml::<PhantomConfig>(p)?,
        None => PhantomConfig::desk(),
    };
    if let Some(s) = seed {
        c.seed = s;
    }
    c.validate()?;
    match kind {
        PhantomKind::Bscan => generate_dataset(&c, n_train, n_test, out).map(drop),
        PhantomKind::Enface => datasets::write_enface_dataset(&c, n_train, n_test, out).map(drop),
        PhantomKind::Volume => {
            let p = generate_volume::<f32>(&c)?;
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            save_volume(&p.volume, &out.join("volume.raw"))?;
            for (f, s) in p.samples.iter().enumerate() {
                write_mask(&out.join(format!("truth/choroid_{f:05}.png")), &s.choroid_mask)?;
                write_layer_map(&out.join(format!("truth/layers_{f:05}.png")), &s.layer_map)?;
            }
            write_mask(&out.join("truth/shadow_mask.png"), &p.shadow_mask)?;
            write_mask(&out.join("truth/choroid_vessels.png"), &p.choroid_vessel_map)
        }
    }
}

pub fn train_biomarker(config: Option<&Path>, data: Option<&Path>, out: &Path) -> Result<()> {
    let c = pipeline_config(config)?;
    create_parent(out)?;
    let samples = || match data {
        Some(dir) => Ok(choroid::phantom::load_dataset::<f32>(dir)?
            .1
            .iter()
            .filter(|s| s.meta.split == Split::Train)
            .map(|s| choroid::bionet::MaskSample::from_mask(&s.choroid))
            .collect()),
        None => Ok(bscan_phantoms(&data_base(&c, "bscan-data"), c.biomarker.n_train, 0)?.0.iter().map(mask_sample).collect()),
    };
    let section = crate::config::StageSection { checkpoint: None, ..c.biomarker.clone() };
    models::biomarker(&section, c.run.seed, samples, Sink { checkpoint: Some(out), logs: out.parent() }).map(drop)
}

pub fn train_bionet(config: Option<&Path>, data: Option<&Path>, variant: Option<&str>, biomarker: Option<&Path>, out: &Path) -> Result<()> {
    let c = pipeline_config(config)?;
    let mut section = crate::config::StageSection { checkpoint: None, ..c.bionet.clone() };
    if let Some(v) = variant {
        section.model.variant = Variant::parse(v)?;
    }
    let bio = match (section.model.variant.uses_bio(), biomarker.or(c.biomarker.checkpoint.as_deref())) {
        (false, _) => None,
        (true, Some(p)) => Some(BiomarkerNet::load(p)?),
        (true, None) => {
            return Err(Error::config("biomarker", format!("variant {} needs --biomarker <checkpoint>", section.model.variant.name())));
        }
    };
    create_parent(out)?;
    let samples = || match data {
        Some(dir) => datasets::load_seg_samples(dir, Split::Train),
        None => bscan_phantoms(&data_base(&c, "bscan-data"), section.n_train, 0)?.0.iter().map(seg_sample).collect(),
    };
    models::bionet(&section, c.run.seed, bio.as_ref(), samples, Sink { checkpoint: Some(out), logs: out.parent() }).map(drop)
}

fn enface_training(c: &PipelineConfig, data: Option<&Path>, n: usize) -> Result<Vec<datasets::EnFaceRecord>> {
    match data {
        Some(dir) => Ok(read_enface_dataset(dir)?.into_iter().filter(|r| r.meta.split == Split::Train).collect()),
        None => enface_phantoms(&data_base(c, "enface-data"), n, 0),
    }
}

pub fn train_shadow_seg(config: Option<&Path>, data: Option<&Path>, out: &Path) -> Result<()> {
    let c = pipeline_config(config)?;
    let section = crate::config::StageSection { checkpoint: None, ..c.shadow_seg.clone() };
    create_parent(out)?;
    let samples = || enface_training(&c, data, section.n_train)?.iter().map(|r| r.shadow_sample()).collect();
    models::shadow_segmenter(&section, c.run.seed, samples, Sink { checkpoint: Some(out), logs: out.parent() }).map(drop)
}

pub fn train_deshadow(stage: &str, config: Option<&Path>, data: Option<&Path>, init: Option<&Path>, out: &Path) -> Result<()> {
    let stage = Stage::parse(stage)?;
    let c = pipeline_config(config)?;
    if stage != Stage::Edge && init.is_none() {
        return Err(Error::config("init", format!("stage '{stage}' continues from a checkpoint; pass --init")));
    }
    create_parent(out)?;
    let textures: Vec<_> = enface_training(&c, data, c.deshadow.n_train)?.into_iter().map(|r| r.clean.into_pixels()).collect();
    let train = stage_train(&c.deshadow.train, c.run.seed, "deshadow");
    models::deshadow_stages(&c.deshadow.model, init, &[stage], &train, &textures, Sink { checkpoint: Some(out), logs: out.parent() }).map(drop)
}

pub fn segment(input: &Path, model: &Path, out: &Path) -> Result<()> {
    let model = BioNet::<f32>::load(model)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let frames = if input.extension().is_some_and(|e| e == "png") {
        vec![BScan::new(read_image(input)?, Pitches::default())?]
    } else {
        let v = load_volume::<f32>(input)?;
        (0..v.frames()).map(|f| v.bscan(f)).collect::<Result<_>>()?
    };
    let mut rows = Vec::new();
    for (f, b) in frames.iter().enumerate() {
        let seg = segment_choroid(b, &model)?;
        write_mask(&out.join(format!("choroid_{f:05}.png")), &seg.choroid)?;
        if let Some(l) = &seg.layers {
            write_layer_map(&out.join(format!("layers_{f:05}.png")), l)?;
        }
        let t = seg.thickness.as_ref();
        rows.push((f, t.map_or(f64::NAN, |t| f64::from(t.mean)), t.map_or(0, |t| t.valid_columns())));
    }
    write_csv(&out.join("thickness.csv"), &rows.into_iter().map(|(frame, mean, valid)| ThicknessRow { frame, mean_thickness_um: mean, valid_columns: valid }).collect::<Vec<_>>())
}

pub fn enface(input: &Path, seg: &Path, out: &Path) -> Result<()> {
    let volume = load_volume::<f32>(input)?;
    let masks = read_frame_masks(seg, volume.frames())?;
    let pair = enface_pair(&volume, &masks)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_enface(&out.join("rpe.png"), &pair.rpe)?;
    write_enface(&out.join("choroid.png"), &pair.choroid)?;
    write_mask(&out.join("empty_columns.png"), &pair.empty)
}

pub fn locate(rpe: &Path, model: &Path, out: &Path) -> Result<()> {
    let model = ShadowSegmenter::<f32>::load(model)?;
    let mask = locate_shadows(&read_enface(rpe)?, &model)?;
    create_parent(out)?;
    write_mask(out, &mask)
}

pub fn deshadow(choroid: &Path, mask: &Path, model: &Path, out: &Path) -> Result<()> {
    let model = DeshadowModel::<f32>::load(model)?;
    let result = eliminate_shadows(&read_enface(choroid)?, &read_mask(mask)?, &model)?;
    create_parent(out)?;
    write_enface(out, &result)
}

pub fn evaluate_seg(pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let rows = eval::evaluate_seg(pred, gt)?;
    write_csv(out, &rows)
}

/// Scores the dataset's test split, or every sample if it has none.
pub fn evaluate_inpaint(data: &Path, model: &Path, out: &Path) -> Result<()> {
    let model = DeshadowModel::<f32>::load(model)?;
    let records = read_enface_dataset(data)?;
    let mut chosen = datasets::split(&records, Split::Test);
    if chosen.is_empty() {
        chosen = records.iter().collect();
    }
    write_csv(out, &eval::evaluate_inpaint(&chosen, &model)?)
}

pub fn pipeline(config: Option<&Path>, out: &Path) -> Result<()> {
    let c = pipeline_config(config)?;
    let run = pipe::run_pipeline(&c, out)?;
    let vd = run.vessel_density;
    println!("vessel density: original {:.4}, deshadowed {:.4}, shadow-excluded {:.4}", vd.original, vd.deshadowed, vd.shadow_excluded);
    Ok(())
}

pub fn ablation(config: Option<&Path>, out: &Path) -> Result<()> {
    let c = match config {
        Some(p) => {
            let c: AblationConfig = load_toml(p)?;
            c.validate()?;
            c
        }
        None => AblationConfig::default(),
    };
    let result = suite::ablation_suite(&c, Some(out))?;
    println!("method,IOU,AUSDE,DI,Acc,Sen");
    for m in &result.medians {
        println!("{},{:.4},{:.3},{:.4},{:.4},{:.4}", m.method, m.iou, m.ausde, m.di, m.acc, m.sen);
    }
    Ok(())
}

pub fn default_config(which: &str) -> String {
    match which {
        "ablation" => toml::to_string(&AblationConfig::default()).expect("ablation config serializes"),
        _ => PipelineConfig::default().to_toml(),
    }
}

/// Masks of every frame in a segmentation directory, for callers that already hold a volume.
pub fn read_frame_masks(dir: &Path, frames: usize) -> Result<Vec<RegionMask>> {
    (0..frames).map(|f| read_mask(&dir.join(format!("choroid_{f:05}.png")))).collect()
}
