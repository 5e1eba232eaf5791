//! Ablation suite: every configured variant trained once per seed on the same phantoms,
//! scored on held-out phantoms, summarized by the median over seeds.

use std::fs;
use std::path::Path;

use choroid::bionet::{segment_choroid, train_bionet, variant_slug, BioNetConfig, BiomarkerNet, Variant};
use choroid::phantom::PhantomSample;
use choroid::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::AblationConfig;
use crate::datasets::{bscan_phantoms, mask_sample, seg_sample};
use crate::eval::{write_csv, ScoreRow};
use crate::models::{self, stage_train, Sink};

/// Held-out means of one variant trained with one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub seed: u64,
    pub method: String,
    pub variant: Variant,
    #[serde(rename = "IOU")]
    pub iou: f64,
    /// Mean of the two boundary errors, pixels; NaN if no prediction had a boundary.
    #[serde(rename = "AUSDE")]
    pub ausde: f64,
    #[serde(rename = "DI")]
    pub di: f64,
    #[serde(rename = "Acc")]
    pub acc: f64,
    #[serde(rename = "Sen")]
    pub sen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub method: String,
    #[serde(rename = "IOU")]
    pub iou: f64,
    #[serde(rename = "AUSDE")]
    pub ausde: f64,
    #[serde(rename = "DI")]
    pub di: f64,
    #[serde(rename = "Acc")]
    pub acc: f64,
    #[serde(rename = "Sen")]
    pub sen: f64,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub runs: Vec<RunRow>,
    pub medians: Vec<MedianRow>,
}

impl AblationResult {
    pub fn median(&self, variant: Variant) -> Option<&MedianRow> {
        self.medians.iter().find(|m| m.method == variant.name())
    }
}

/// Median of the finite values; NaN when there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_finite(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn score(model: &choroid::bionet::BioNet<f32>, test: &[PhantomSample<f32>]) -> Result<Vec<ScoreRow>> {
    test.iter()
        .enumerate()
        .map(|(i, s)| ScoreRow::new(format!("{i:05}"), &segment_choroid(&s.bscan, model)?.choroid, &s.choroid_mask))
        .collect()
}

/// Runs the suite; with `out_dir`, writes `ablation.csv` (medians), `runs.csv` and training logs.
pub fn ablation_suite(config: &AblationConfig, out_dir: Option<&Path>) -> Result<AblationResult> {
    config.validate()?;
    let (train, test) = bscan_phantoms(&config.phantom, config.n_train, config.n_test)?;
    let seg: Vec<_> = train.iter().map(seg_sample).collect::<Result<_>>()?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let logs = out_dir.map(|d| d.join("logs"));
    let bio_ckpt = out_dir.map(|d| d.join("biomarker.ckpt"));

    let bio: Option<BiomarkerNet<f32>> = if config.variants.iter().any(|v| v.uses_bio()) {
        let sink = Sink { checkpoint: bio_ckpt.as_deref(), logs: logs.as_deref() };
        let (net, _) = models::biomarker(&config.biomarker, config.phantom.seed, || Ok(train.iter().map(mask_sample).collect()), sink)?;
        Some(net)
    } else {
        None
    };

    let mut runs = Vec::new();
    for &seed in &config.seeds {
        for &variant in &config.variants {
            let model_config = BioNetConfig { variant, ..config.model };
            let mut tc = stage_train(&config.train, seed, "bionet");
            tc.checkpoint_dir = None;
            let (model, report) = train_bionet(&seg, bio.as_ref(), &model_config, &tc)?;
            if let Some(dir) = &logs {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(format!("{}_seed{seed}_log.csv", variant_slug(variant)));
                fs::write(&path, report.csv()).map_err(|e| Error::io(path, e))?;
            }
            let rows = score(&model, &test)?;
            let row = RunRow {
                seed,
                method: variant.name().into(),
                variant,
                iou: mean_finite(rows.iter().map(|r| r.iou)),
                ausde: mean_finite(rows.iter().map(ScoreRow::ausde)),
                di: mean_finite(rows.iter().map(|r| r.di)),
                acc: mean_finite(rows.iter().map(|r| r.acc)),
                sen: mean_finite(rows.iter().map(|r| r.sen)),
            };
            log::info!("seed {seed} {}: DI {:.4} AUSDE {:.2}", row.method, row.di, row.ausde);
            runs.push(row);
        }
    }

    let medians = config
        .variants
        .iter()
        .map(|&v| {
            let of = |f: fn(&RunRow) -> f64| median(runs.iter().filter(|r| r.variant == v).map(f));
            MedianRow { method: v.name().into(), iou: of(|r| r.iou), ausde: of(|r| r.ausde), di: of(|r| r.di), acc: of(|r| r.acc), sen: of(|r| r.sen) }
        })
        .collect();
    let result = AblationResult { runs, medians };
    if let Some(dir) = out_dir {
        write_csv(&dir.join("ablation.csv"), &result.medians)?;
        write_csv(&dir.join("runs.csv"), &result.runs)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median([3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median([4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn median_skips_non_finite() {
        assert_eq!(median([f64::NAN, 5.0, 1.0, f64::INFINITY]), 3.0);
        assert!(median([f64::NAN]).is_nan());
        assert!(median([]).is_nan());
    }

    #[test]
    fn mean_skips_non_finite() {
        assert_eq!(mean_finite([1.0, f64::NAN, 3.0]), 2.0);
        assert!(mean_finite([f64::NAN]).is_nan());
    }
}
