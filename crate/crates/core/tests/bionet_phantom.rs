//! Bio-Net trained briefly on desk phantoms, checked against phantom ground truth.

use std::sync::OnceLock;

use choroid::bionet::*;
use choroid::metrics::seg_scores;
use choroid::nn::{Graph, Tensor};
use choroid::oct::{BScan, Layer, RegionMask};
use choroid::phantom::{generate_bscan, PhantomConfig, PhantomSample};
use choroid::training::TrainConfig;
use ndarray::Array2;

fn phantoms(seeds: std::ops::Range<u64>, noiseless: bool) -> Vec<PhantomSample<f32>> {
    seeds
        .map(|s| {
            let c = PhantomConfig::desk().with_seed(s);
            let c = if noiseless { c.noiseless() } else { c };
            generate_bscan(&c, 32).unwrap()
        })
        .collect()
}

fn train_config(epochs: usize, drop: usize) -> TrainConfig {
    TrainConfig { max_epochs: epochs, crop_width: Some(64), lr_drop_epochs: vec![drop], ..TrainConfig::default() }
}

struct Trained {
    bio: BiomarkerNet<f32>,
    bio_report: BiomarkerReport,
    model: BioNet<f32>,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let train = phantoms(100..300, false);
        let masks: Vec<MaskSample<f32>> = train.iter().map(|s| MaskSample::from_mask(&s.choroid_mask)).collect();
        let (bio, bio_report) = train_biomarker_net(&masks, BiomarkerConfig::default(), &TrainConfig { initial_lr: BIOMARKER_LR, ..train_config(10, 10) }).unwrap();
        let seg: Vec<SegSample<f32>> =
            train.iter().map(|s| SegSample::new(s.bscan.pixels().clone(), &s.layer_map, &s.choroid_mask).unwrap()).collect();
        let (model, _) = train_bionet(&seg, Some(&bio), &BioNetConfig::default(), &train_config(8, 6)).unwrap();
        Trained { bio, bio_report, model }
    })
}

fn float(mask: &RegionMask) -> Array2<f32> {
    mask.to_float()
}

#[test]
fn biomarker_net_tracks_mask_thickness() {
    let t = trained();
    assert!(t.bio.is_frozen());
    assert!(t.bio_report.converged, "validation error {} px", t.bio_report.val_mae_px);
    let mut worst = 0.0f64;
    for s in phantoms(900..910, false) {
        let (_, b) = t.bio.predict(&float(&s.choroid_mask));
        let truth = s.choroid_mask.count() as f64 / s.choroid_mask.dim().1 as f64;
        worst = worst.max((b as f64 - truth).abs());
    }
    assert!(worst <= 2.0, "held-out thickness error {worst} px");
}

#[test]
fn biomarker_of_uniform_band() {
    let t = trained();
    let band = Array2::from_shape_fn((192, 192), |(r, _)| if (120..150).contains(&r) { 1.0f32 } else { 0.0 });
    let (_, b) = t.bio.predict(&band);
    assert!((b - 30.0).abs() <= 2.0, "30-px band predicted as {b}");
    let (cols, b) = t.bio.predict(&Array2::zeros((192, 192)));
    assert!(b >= 0.0 && cols.iter().all(|&v| v >= 0.0));
}

#[test]
fn consistency_loss_grows_with_dilation() {
    let t = trained();
    let s = &phantoms(950..951, true)[0];
    let gt = float(&s.choroid_mask);
    let (h, w) = gt.dim();
    let to_t = |a: &Array2<f32>| Tensor::from_vec([1, 1, h, w], a.iter().copied().collect()).unwrap();
    let b_ref = bio_reference(&t.bio, &to_t(&gt));
    let mut prev = -1.0f32;
    for k in [0usize, 1, 2, 4] {
        let grown = Array2::from_shape_fn((h, w), |(r, c)| {
            let lo = r.saturating_sub(k);
            let hi = (r + k).min(h - 1);
            (lo..=hi).any(|rr| gt[[rr, c]] > 0.5) as u8 as f32
        });
        let mut g = Graph::new();
        let c = g.input(to_t(&grown));
        let l = bio_consistency_loss(&mut g, c, &t.bio, &b_ref).unwrap();
        let v = g.value(l).data()[0];
        assert!(v > prev, "k={k}: loss {v} not above {prev}");
        prev = v;
    }
}

#[test]
fn segments_noiseless_phantoms() {
    let t = trained();
    for s in phantoms(700..704, true) {
        let seg = segment_choroid(&s.bscan, &t.model).unwrap();
        assert!(!seg.empty);
        let di = seg_scores::<f64>(&seg.choroid, &s.choroid_mask).unwrap().di;
        assert!(di >= 0.95, "DI {di}");
    }
}

#[test]
fn blank_input_is_flagged_empty() {
    let t = trained();
    let blank = BScan::new(Array2::<f32>::zeros((192, 192)), Default::default()).unwrap();
    let seg = segment_choroid(&blank, &t.model).unwrap();
    assert!(seg.empty);
    assert!(seg.thickness.is_none());
}

/// Fraction of ordered columns in the argmax layer maps and the fraction of pixels where the
/// argmax choroid agrees with the thresholded local head, over noisy held-out phantoms.
fn layer_map_stats() -> (f64, f64) {
    let t = trained();
    let (mut ok_cols, mut cols, mut agree, mut px) = (0usize, 0usize, 0usize, 0usize);
    for s in phantoms(800..806, false) {
        let seg = segment_choroid(&s.bscan, &t.model).unwrap();
        let layers = seg.layers.unwrap();
        cols += layers.dim().1;
        ok_cols += layers.dim().1 - layers.ordering_violations().len();
        let from_global = layers.region(Layer::Choroid);
        let raw = seg.probability.mapv(|p| p > 0.5);
        agree += raw.iter().zip(from_global.mask()).filter(|(a, b)| a == b).count();
        px += raw.len();
    }
    (ok_cols as f64 / cols as f64, agree as f64 / px as f64)
}

#[test]
fn global_and_local_heads_agree() {
    let (_, agreement) = layer_map_stats();
    assert!(agreement >= 0.90, "head agreement {agreement}");
}

#[test]
fn layer_map_is_ordered() {
    let (ordered, _) = layer_map_stats();
    assert!(ordered >= 0.95, "ordered columns {ordered}");
}

#[test]
fn flip_changes_dice_little() {
    let t = trained();
    for s in phantoms(600..604, false) {
        let di = seg_scores::<f64>(&segment_choroid(&s.bscan, &t.model).unwrap().choroid, &s.choroid_mask).unwrap().di;
        let flipped = BScan::new(s.bscan.pixels().slice(ndarray::s![.., ..;-1]).to_owned(), s.bscan.pitches()).unwrap();
        let seg = segment_choroid(&flipped, &t.model).unwrap();
        let di_f = seg_scores::<f64>(&seg.choroid, &s.choroid_mask.flip_horizontal()).unwrap().di;
        assert!((di - di_f).abs() <= 0.02, "DI {di} vs flipped {di_f}");
    }
}
