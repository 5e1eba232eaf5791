use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::bionet::UNetConfig;
use crate::error::Error;
use crate::oct::{EnFaceImage, RegionMask};
use crate::training::{AugmentConfig, TrainConfig};

fn line_mask(dim: (usize, usize), row: usize, cols: std::ops::Range<usize>) -> RegionMask {
    let mut m = RegionMask::empty(dim);
    for c in cols {
        m.mask_mut()[[row, c]] = true;
    }
    m
}

fn column_run(m: &RegionMask, col: usize) -> Vec<usize> {
    (0..m.dim().0).filter(|&r| m.get(r, col)).collect()
}

#[test]
fn refined_line_is_seven_pixels_wide() {
    let raw = line_mask((40, 60), 20, 10..50);
    let refined = refine_mask(&raw);
    assert_eq!(column_run(&refined, 30), (17..=23).collect::<Vec<_>>());
    // closing alone leaves a straight line unchanged
    assert_eq!(close_mask(&raw), raw);
}

#[test]
fn two_pixel_gap_is_merged() {
    // 1-px segments: joined by the full refinement
    let mut raw = line_mask((40, 60), 20, 10..25);
    for c in 27..45 {
        raw.mask_mut()[[20, c]] = true;
    }
    let (_, sizes) = crate::imgproc::label_components(refine_mask(&raw).mask());
    assert_eq!(sizes.len(), 2, "one component plus background");
    // 3-px-wide segments: joined by the closing alone
    let mut thick = RegionMask::empty((40, 60));
    for r in 19..22 {
        for c in (10..25).chain(27..45) {
            thick.mask_mut()[[r, c]] = true;
        }
    }
    let closed = close_mask(&thick);
    assert!(closed.get(20, 25) && closed.get(20, 26));
    assert_eq!(crate::imgproc::label_components(closed.mask()).1.len(), 2);
    assert_eq!(crate::imgproc::label_components(thick.mask()).1.len(), 3);
}

#[test]
fn empty_mask_stays_empty() {
    assert!(refine_mask(&RegionMask::empty((16, 16))).is_empty());
}

#[test]
fn refinement_is_superset_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let density = rng.random_range(0.0..0.3);
        let raw = RegionMask::new(Array2::from_shape_fn((24, 32), |_| rng.random_bool(density)));
        let refined = refine_mask(&raw);
        assert!(raw.mask().iter().zip(refined.mask().iter()).all(|(&r, &f)| !r || f));
    }
}

#[test]
fn constant_image_has_no_edges() {
    let img = EnFaceImage::new(Array2::from_elem((32, 32), 0.4f64)).unwrap();
    assert!(edge_map(&img).is_empty());
}

#[test]
fn vertical_step_gives_single_edge_line() {
    let img = EnFaceImage::new(Array2::from_shape_fn((40, 40), |(_, c)| if c < 20 { 0.25f64 } else { 0.75 })).unwrap();
    let e = edge_map(&img);
    let cols: Vec<usize> = (0..40).filter(|&c| (0..40).any(|r| e.get(r, c))).collect();
    assert_eq!(cols.len(), 1, "edge columns {cols:?}");
    assert!(cols[0] == 19 || cols[0] == 20);
    // one edge pixel per row away from the image border
    for r in 4..36 {
        assert_eq!((0..40).filter(|&c| e.get(r, c)).count(), 1);
    }
}

#[test]
fn sampler_draws_vessel_like_masks() {
    let s = MaskSampler::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let m = s.sample((64, 64), &mut rng).unwrap();
        assert!(m.count() > 0);
        assert!(m.count() as f64 <= 0.4 * 4096.0);
    }
}

#[test]
fn sampler_rejects_degenerate_masks() {
    let s = MaskSampler { max_fraction: 0.01, ..MaskSampler::default() };
    // a 4x4 image allows no pixel at 1%, so every draw is rejected
    let err = s.sample((4, 4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    let bad = MaskSampler { width_px: (5, 3), ..MaskSampler::default() };
    assert!(matches!(bad.validate().unwrap_err(), Error::Config { .. }));
}

#[test]
fn stage_parsing_and_names() {
    assert_eq!(Stage::parse("joint").unwrap(), Stage::Joint);
    assert!(matches!(Stage::parse("texture").unwrap_err(), Error::Config { .. }));
    assert_eq!(Stage::Joint.loss_names().len(), 8);
}

fn tiny_config() -> DeshadowConfig {
    DeshadowConfig { generator_channels: 4, residual_blocks: 1, discriminator_channels: 4, crop: 32, ..DeshadowConfig::default() }
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        initial_lr: 1e-3,
        batch_size: 2,
        max_epochs: epochs,
        lr_drop_epochs: vec![],
        augmentation: AugmentConfig::none(),
        ..TrainConfig::default()
    }
}

fn textures(n: usize, seed: u64) -> Vec<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (fy, fx) = (rng.random_range(0.1..0.4), rng.random_range(0.1..0.4));
            Array2::from_shape_fn((36, 40), |(r, c)| 0.5 + 0.3 * ((r as f64 * fy).sin() * (c as f64 * fx).cos()))
        })
        .collect()
}

#[test]
fn stage_order_is_enforced() {
    let mut m = DeshadowModel::<f64>::new(tiny_config(), 0).unwrap();
    let tex = textures(2, 1);
    let err = m.train_stage(Stage::Joint, &tex, &tiny_train(1)).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)), "{err}");
    assert!(matches!(m.train_stage(Stage::Inpaint, &tex, &tiny_train(1)).unwrap_err(), Error::Precondition(_)));
    m.train_stage(Stage::Edge, &tex, &tiny_train(1)).unwrap();
    assert!(m.train_stage(Stage::Joint, &tex, &tiny_train(1)).is_err());
    m.train_stage(Stage::Inpaint, &tex, &tiny_train(1)).unwrap();
    m.train_stage(Stage::Joint, &tex, &tiny_train(1)).unwrap();
    assert_eq!(m.trained_stage(), Some(Stage::Joint));
    // repeating an earlier stage keeps the furthest stage reached
    m.train_stage(Stage::Edge, &tex, &tiny_train(1)).unwrap();
    assert_eq!(m.trained_stage(), Some(Stage::Joint));
}

#[test]
fn textures_smaller_than_crop_are_rejected() {
    let mut m = DeshadowModel::<f64>::new(tiny_config(), 0).unwrap();
    let err = m.train_stage(Stage::Edge, &[Array2::from_elem((20, 40), 0.5)], &tiny_train(1)).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn collapse_guard_trips_after_fifty_steps() {
    let mut g = CollapseGuard::new("D2");
    for _ in 0..COLLAPSE_STEPS - 1 {
        g.observe(1e-5).unwrap();
    }
    g.observe(0.3).unwrap();
    for _ in 0..COLLAPSE_STEPS - 1 {
        g.observe(1e-6).unwrap();
    }
    let err = g.observe(1e-6).unwrap_err();
    assert!(matches!(err, Error::Divergence(_)));
    assert!(err.to_string().contains("D2"));
}

fn trained_tiny() -> DeshadowModel<f64> {
    let mut m = DeshadowModel::<f64>::new(tiny_config(), 4).unwrap();
    let tex = textures(2, 2);
    m.train_stage(Stage::Edge, &tex, &tiny_train(1)).unwrap();
    m.train_stage(Stage::Inpaint, &tex, &tiny_train(1)).unwrap();
    m
}

fn stripe_mask(dim: (usize, usize), cols: std::ops::Range<usize>) -> RegionMask {
    RegionMask::new(Array2::from_shape_fn(dim, |(_, c)| cols.contains(&c)))
}

#[test]
fn empty_mask_returns_input_unchanged() {
    let untrained = DeshadowModel::<f64>::new(tiny_config(), 0).unwrap();
    let img = EnFaceImage::new(textures(1, 5).remove(0)).unwrap();
    let out = eliminate_shadows(&img, &RegionMask::empty(img.dim()), &untrained).unwrap();
    assert_eq!(out, img);
}

#[test]
fn composition_is_exact_outside_mask() {
    let m = trained_tiny();
    // 37 x 41 exercises the padding path
    let img = EnFaceImage::new(Array2::from_shape_fn((37, 41), |(r, c)| ((r * 7 + c * 3) % 17) as f64 / 16.0)).unwrap();
    let mask = stripe_mask(img.dim(), 10..14);
    let out = eliminate_shadows(&img, &mask, &m).unwrap();
    for ((ix, &o), &i) in out.pixels().indexed_iter().zip(img.pixels().iter()) {
        if mask.mask()[ix] {
            assert!((0.0..=1.0).contains(&o));
        } else {
            assert_eq!(o.to_bits(), i.to_bits());
        }
    }
    // deterministic inference
    assert_eq!(eliminate_shadows(&img, &mask, &m).unwrap(), out);
}

#[test]
fn oversized_mask_is_refused() {
    let m = trained_tiny();
    let img = EnFaceImage::new(Array2::from_elem((32, 32), 0.5f64)).unwrap();
    let err = eliminate_shadows(&img, &stripe_mask((32, 32), 0..20), &m).unwrap_err();
    assert!(matches!(err, Error::Data(ref s) if s.contains("62.5%")), "{err}");
    assert!(eliminate_shadows(&img, &stripe_mask((32, 32), 0..19), &m).is_ok());
    let wrong = RegionMask::empty((32, 31));
    assert!(matches!(eliminate_shadows(&img, &wrong, &m).unwrap_err(), Error::Shape { .. }));
}

#[test]
fn model_without_inpaint_stage_is_refused() {
    let mut m = DeshadowModel::<f64>::new(tiny_config(), 0).unwrap();
    m.train_stage(Stage::Edge, &textures(2, 1), &tiny_train(1)).unwrap();
    let img = EnFaceImage::new(Array2::from_elem((32, 32), 0.5f64)).unwrap();
    assert!(matches!(eliminate_shadows(&img, &stripe_mask((32, 32), 3..5), &m).unwrap_err(), Error::Precondition(_)));
}

#[test]
fn deshadow_checkpoint_round_trip() {
    let m = trained_tiny();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ckpt");
    m.save(&path, 2).unwrap();
    let back = DeshadowModel::<f64>::load(&path).unwrap();
    assert_eq!(back.trained_stage(), Some(Stage::Inpaint));
    assert_eq!(back.config(), m.config());
    let img = EnFaceImage::new(textures(1, 9).remove(0)).unwrap();
    let mask = stripe_mask(img.dim(), 5..9);
    assert_eq!(eliminate_shadows(&img, &mask, &back).unwrap(), eliminate_shadows(&img, &mask, &m).unwrap());
    assert!(matches!(ShadowSegmenter::<f64>::load(&path).unwrap_err(), Error::Checkpoint(_)));
}

#[test]
fn training_writes_stage_log() {
    let mut m = DeshadowModel::<f64>::new(tiny_config(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let train = TrainConfig { checkpoint_dir: Some(dir.path().to_path_buf()), ..tiny_train(2) };
    let report = m.train_stage(Stage::Edge, &textures(3, 1), &train).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert_eq!(report.steps, 4);
    let log = std::fs::read_to_string(dir.path().join("deshadow_edge_log.csv")).unwrap();
    assert!(log.starts_with("epoch,lr,loss_d1,loss_g1_adv,loss_g1_fm\n"));
    assert_eq!(log.lines().count(), 3);
    assert!(dir.path().join("deshadow_edge.ckpt").exists());
}

/// Bright RPE with one or two dark vertical stripes, and the matching mask.
fn stripe_pair(rng: &mut ChaCha8Rng) -> ShadowSample<f64> {
    let (h, w) = (16, 32);
    let mut mask = Array2::from_elem((h, w), false);
    for _ in 0..rng.random_range(1..=2) {
        let c0 = rng.random_range(2..w - 6);
        let width = rng.random_range(2..=4);
        mask.columns_mut().into_iter().skip(c0).take(width).for_each(|mut col| col.fill(true));
    }
    let image = Array2::from_shape_fn((h, w), |ix| {
        let base = 0.8 + rng.random_range(-0.05..0.05);
        if mask[ix] {
            base * 0.35
        } else {
            base
        }
    });
    ShadowSample { image, mask }
}

fn small_unet() -> UNetConfig {
    UNetConfig { in_channels: 1, out_channels: 1, base_channels: 4, levels: 2 }
}

#[test]
fn shadow_segmenter_learns_stripes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pairs: Vec<_> = (0..4).map(|_| stripe_pair(&mut rng)).collect();
    let train = TrainConfig { initial_lr: 0.01, batch_size: 2, max_epochs: 60, lr_drop_epochs: vec![], val_fraction: 0.0, ..TrainConfig::default() };
    let (model, report) = train_shadow_segmenter(&pairs, small_unet(), &train).unwrap();
    assert_eq!(report.loss_names, vec!["loss_bce"]);
    let test = stripe_pair(&mut rng);
    let rpe = EnFaceImage::new(test.image.clone()).unwrap();
    let raw = model.segment(&rpe).unwrap();
    let acc = raw.mask().iter().zip(test.mask.iter()).filter(|(a, b)| a == b).count() as f64 / test.mask.len() as f64;
    assert!(acc > 0.95, "accuracy {acc}");
    let located = locate_shadows(&rpe, &model).unwrap();
    assert_eq!(located, refine_mask(&raw));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    model.save(&path, 1).unwrap();
    let back = ShadowSegmenter::<f64>::load(&path).unwrap();
    assert_eq!(back.probability(&rpe).unwrap(), model.probability(&rpe).unwrap());
}

#[test]
fn segmenter_handles_odd_sizes_and_rejects_bad_config() {
    let m = ShadowSegmenter::<f64>::new(small_unet(), 0).unwrap();
    let rpe = EnFaceImage::new(Array2::from_elem((13, 18), 0.5)).unwrap();
    assert_eq!(m.segment(&rpe).unwrap().dim(), (13, 18));
    assert!(matches!(ShadowSegmenter::<f64>::new(UNetConfig::new(2, 1), 0).unwrap_err(), Error::Config { .. }));
    let odd = ShadowSample { image: Array2::from_elem((10, 32), 0.5), mask: Array2::from_elem((10, 32), false) };
    assert!(matches!(train_shadow_segmenter(&[odd], small_unet(), &tiny_train(1)).unwrap_err(), Error::Data(_)));
}
