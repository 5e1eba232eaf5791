use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::gradcheck::{finite_difference, relative_error};
use crate::nn::{Graph, Tensor};
use crate::oct::{BScan, Layer, LayerMap, Pitches, RegionMask, LAYER_COUNT};
use crate::training::{AugmentConfig, TrainConfig};

const GRAD_TOL: f64 = 1e-3;

fn random_tensor(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn random_labels(n: usize, h: usize, w: usize, seed: u64) -> Vec<Array2<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Array2::from_shape_fn((h, w), |_| rng.random_range(0..LAYER_COUNT as u8))).collect()
}

/// Analytic gradient of `f` with respect to a leaf, next to the finite-difference oracle.
fn grad_pair(x: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, crate::nn::Var) -> crate::nn::Var) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let out = f(&mut g, v);
    let analytic = g.backward(out).get(v).expect("leaf gradient").clone();
    let numeric = finite_difference(x, 1e-6, |p| {
        let mut g = Graph::new();
        let v = g.leaf(p.clone());
        let out = f(&mut g, v);
        g.value(out).data()[0]
    });
    (analytic, numeric)
}

fn frozen_bio(seed: u64) -> BiomarkerNet<f64> {
    let mut b = BiomarkerNet::new(BiomarkerConfig { base_channels: 2 }, seed).unwrap();
    b.freeze();
    b
}

#[test]
fn total_loss_arithmetic_and_linearity() {
    let w = LossWeights::default();
    assert_eq!((w.multilayers, w.choroid, w.bio), (1.0, 1.0, 0.01));
    assert!((total_loss([0.3f64, 0.2, 5.0], &w) - 0.55).abs() < 1e-12);
    assert_eq!(total_loss([0.0f64; 3], &w), 0.0);
    let parts = [0.7f64, 1.3, 42.0];
    for k in 0..3 {
        let mut w2 = w;
        let base = total_loss(parts, &w2);
        match k {
            0 => w2.multilayers += 2.0,
            1 => w2.choroid += 2.0,
            _ => w2.bio += 2.0,
        }
        assert!((total_loss(parts, &w2) - base - 2.0 * parts[k]).abs() < 1e-9);
    }
    assert!(LossWeights { bio: -1.0, ..w }.validate().is_err());
}

#[test]
fn total_loss_on_graph_matches_plain_sum() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::scalar(0.3));
    let b = g.input(Tensor::scalar(0.2));
    let c = g.input(Tensor::scalar(5.0));
    let t = total_loss_var(&mut g, [Some(a), Some(b), Some(c)], &LossWeights::default()).unwrap();
    assert!((g.value(t).data()[0] - 0.55).abs() < 1e-12);
    assert!(total_loss_var(&mut g, [None, None, None], &LossWeights::default()).is_err());
}

#[test]
fn multilayer_loss_closed_forms() {
    let labels = random_labels(2, 4, 4, 1);
    let refs: Vec<&Array2<u8>> = labels.iter().collect();
    let gt: Tensor<f64> = one_hot(&refs).unwrap();
    let mut g = Graph::new();
    let p = g.input(gt.clone());
    let l = multilayer_loss(&mut g, p, gt.clone()).unwrap();
    assert!(g.value(l).data()[0] <= 12.0 * CE_EPS);
    let uniform = Tensor::full(gt.shape(), 1.0 / 12.0);
    let p = g.input(uniform);
    let l = multilayer_loss(&mut g, p, gt.clone()).unwrap();
    assert!((g.value(l).data()[0] - 12f64.ln()).abs() < 1e-12);
}

#[test]
fn multilayer_loss_rejects_bad_inputs() {
    let labels = random_labels(1, 4, 4, 2);
    let gt: Tensor<f64> = one_hot(&[&labels[0]]).unwrap();
    let mut g = Graph::new();
    let p = g.input(Tensor::full(gt.shape(), 1.5));
    assert!(multilayer_loss(&mut g, p, gt.clone()).is_err());
    let p = g.input(Tensor::full([1, LAYER_COUNT, 4, 5], 0.1));
    assert!(multilayer_loss(&mut g, p, gt).is_err());
    assert!(one_hot::<f64>(&[&Array2::from_elem((2, 2), 12u8)]).is_err());
}

#[test]
fn multilayer_loss_gradient_check() {
    let labels = random_labels(1, 4, 4, 3);
    let gt: Tensor<f64> = one_hot(&[&labels[0]]).unwrap();
    let x = random_tensor([1, LAYER_COUNT, 4, 4], 4, -2.0, 2.0);
    let (a, n) = grad_pair(&x, |g, v| {
        let p = g.softmax_channels(v);
        multilayer_loss(g, p, gt.clone()).unwrap()
    });
    assert!(relative_error(&a, &n) < GRAD_TOL, "{}", relative_error(&a, &n));
}

#[test]
fn choroid_loss_closed_forms_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = Tensor::from_fn([2, 1, 4, 4], |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let p = g.input(gt.clone());
    let l = choroid_loss(&mut g, p, gt.clone()).unwrap();
    assert!(g.value(l).data()[0] < 1e-6);
    let p = g.input(Tensor::full(gt.shape(), 0.5));
    let l = choroid_loss(&mut g, p, gt.clone()).unwrap();
    assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);
    let p = g.input(Tensor::full([2, 1, 4, 3], 0.5));
    assert!(choroid_loss(&mut g, p, gt.clone()).is_err());

    let x = random_tensor(gt.shape(), 6, -2.0, 2.0);
    let (a, n) = grad_pair(&x, |g, v| {
        let p = g.sigmoid(v);
        choroid_loss(g, p, gt.clone()).unwrap()
    });
    assert!(relative_error(&a, &n) < GRAD_TOL, "{}", relative_error(&a, &n));
}

#[test]
fn bio_regression_loss_zero_at_equality_and_gradient() {
    let mut g = Graph::new();
    let b = g.input(Tensor::from_vec([3, 1, 1, 1], vec![10.0f64, 20.0, 5.0]).unwrap());
    let l = bio_regression_loss(&mut g, b, &[10.0, 20.0, 5.0]).unwrap();
    assert_eq!(g.value(l).data()[0], 0.0);
    let l = bio_regression_loss(&mut g, b, &[12.0, 17.0, 5.5]).unwrap();
    assert!((g.value(l).data()[0] - (2.0 + 3.0 + 0.5) / 3.0).abs() < 1e-12);
    assert!(bio_regression_loss(&mut g, b, &[1.0]).is_err());

    let x = random_tensor([3, 1, 1, 1], 7, 0.0, 30.0);
    let (a, n) = grad_pair(&x, |g, v| bio_regression_loss(g, v, &[3.0, 14.0, 27.0]).unwrap());
    assert!(relative_error(&a, &n) < GRAD_TOL);
}

#[test]
fn bio_consistency_requires_frozen_network() {
    let bio = BiomarkerNet::<f64>::new(BiomarkerConfig { base_channels: 2 }, 1).unwrap();
    let mut g = Graph::new();
    let c = g.input(Tensor::full([1, 1, 16, 6], 0.5));
    assert!(matches!(bio_consistency_loss(&mut g, c, &bio, &[1.0]), Err(crate::Error::Precondition(_))));
}

#[test]
fn bio_consistency_gradient_reaches_prediction_only() {
    let bio = frozen_bio(2);
    let gt = Tensor::from_fn([2, 1, 16, 6], |[_, _, r, _]| if (5..11).contains(&r) { 1.0 } else { 0.0 });
    let b_ref = bio_reference(&bio, &gt);
    let x = random_tensor([2, 1, 16, 6], 8, -1.5, 1.5);
    let (a, n) = grad_pair(&x, |g, v| {
        let p = g.sigmoid(v);
        bio_consistency_loss(g, p, &bio, &b_ref).unwrap()
    });
    assert!(relative_error(&a, &n) < GRAD_TOL, "{}", relative_error(&a, &n));

    let mut store = bio.store().clone();
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let p = g.sigmoid(v);
    let l = bio_consistency_loss(&mut g, p, &bio, &b_ref).unwrap();
    let grads = g.backward(l);
    assert!(grads.get(v).is_some());
    store.accumulate(&g, &grads);
    assert!(store.grads_all_zero());
}

#[test]
fn bio_consistency_zero_at_ground_truth() {
    let bio = frozen_bio(3);
    let gt = Tensor::from_fn([1, 1, 16, 6], |[_, _, r, c]| if r >= 4 && r < 9 + c / 2 { 1.0 } else { 0.0 });
    let b_ref = bio_reference(&bio, &gt);
    let mut g = Graph::new();
    let c = g.input(gt);
    let l = bio_consistency_loss(&mut g, c, &bio, &b_ref).unwrap();
    assert_eq!(g.value(l).data()[0], 0.0);
}

#[test]
fn biomarker_output_has_one_value_per_column_and_is_clamped() {
    let bio = BiomarkerNet::<f64>::new(BiomarkerConfig::default(), 4).unwrap();
    let (cols, mean) = bio.predict(&Array2::zeros((32, 20)));
    assert_eq!(cols.len(), 20);
    assert!(cols.iter().all(|&v| v >= 0.0) && mean >= 0.0);
}

fn sample(h: usize, w: usize, top: usize, bottom: usize) -> SegSample<f64> {
    let labels = Array2::from_shape_fn((h, w), |(r, _)| {
        if r < top {
            Layer::Rpe.label()
        } else if r < bottom {
            Layer::Choroid.label()
        } else {
            Layer::Sclera.label()
        }
    });
    let image = labels.mapv(|l| if l == Layer::Choroid.label() { 0.8 } else { 0.2 });
    let layers = LayerMap::new(labels).unwrap();
    let choroid = layers.region(Layer::Choroid);
    SegSample::new(image, &layers, &choroid).unwrap()
}

fn tiny(variant: Variant) -> BioNetConfig {
    BioNetConfig { variant, base_channels: 2, levels: 2, weights: LossWeights::default() }
}

fn quick_train(epochs: usize) -> TrainConfig {
    TrainConfig { max_epochs: epochs, batch_size: 2, augmentation: AugmentConfig::none(), val_fraction: 0.0, lr_drop_epochs: vec![], ..TrainConfig::default() }
}

#[test]
fn variants_build_the_documented_modules() {
    for v in Variant::ALL {
        let m = BioNet::<f64>::new(tiny(v), 0).unwrap();
        assert_eq!(m.variant(), v);
        assert!(m.num_parameters() > 0);
    }
    assert_eq!(Variant::parse("gms").unwrap(), Variant::UnetGms);
    assert_eq!(Variant::parse("bio").unwrap(), Variant::UnetBio);
    assert_eq!(Variant::parse("full").unwrap(), Variant::Full);
    assert_eq!(Variant::parse("baseline").unwrap(), Variant::Baseline);
    assert!(matches!(Variant::parse("everything"), Err(crate::Error::Config { .. })));
    // Without the global module, U-Net+Bio sees the raw image just as the baseline does.
    let a = BioNet::<f64>::new(tiny(Variant::UnetBio), 9).unwrap();
    let b = BioNet::<f64>::new(tiny(Variant::Baseline), 9).unwrap();
    assert_eq!(a.num_parameters(), b.num_parameters());
}

#[test]
fn zero_bio_weight_reduces_full_model_to_unet_gms() {
    let data: Vec<SegSample<f64>> = (0..4).map(|k| sample(8, 8, 2 + k % 2, 6)).collect();
    let bio = frozen_bio(1);
    let mut full = tiny(Variant::Full);
    full.weights.bio = 0.0;
    let (a, ra) = train_bionet(&data, Some(&bio), &full, &quick_train(2)).unwrap();
    let (b, rb) = train_bionet(&data, None, &tiny(Variant::UnetGms), &quick_train(2)).unwrap();
    let probe = BScan::new(data[0].image.clone(), Pitches::default()).unwrap();
    let pa = segment_choroid(&probe, &a).unwrap().probability;
    let pb = segment_choroid(&probe, &b).unwrap().probability;
    assert_eq!(pa, pb);
    for (ea, eb) in ra.epochs.iter().zip(&rb.epochs) {
        assert_eq!(ea.components[..2], eb.components[..2]);
    }
}

#[test]
fn bio_variants_need_a_frozen_network() {
    let data = vec![sample(8, 8, 2, 6); 2];
    assert!(train_bionet(&data, None, &tiny(Variant::UnetBio), &quick_train(1)).is_err());
    let unfrozen = BiomarkerNet::new(BiomarkerConfig { base_channels: 2 }, 0).unwrap();
    assert!(train_bionet(&data, Some(&unfrozen), &tiny(Variant::Full), &quick_train(1)).is_err());
    let odd = vec![sample(10, 8, 2, 6); 2];
    assert!(matches!(train_bionet(&odd, None, &tiny(Variant::Baseline), &quick_train(1)), Err(crate::Error::Data(_))));
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let model = BioNet::<f64>::new(tiny(Variant::Full), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path, 3).unwrap();
    let back = BioNet::<f64>::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    let probe = BScan::new(sample(12, 10, 3, 8).image, Pitches::default()).unwrap();
    let a = segment_choroid(&probe, &model).unwrap();
    let b = segment_choroid(&probe, &back).unwrap();
    assert_eq!(a.probability, b.probability);
    assert_eq!(a.layers, b.layers);

    let bio = frozen_bio(5);
    bio.save(&dir.path().join("b.ckpt"), 0).unwrap();
    let bio_back = BiomarkerNet::<f64>::load(&dir.path().join("b.ckpt")).unwrap();
    assert!(bio_back.is_frozen());
    let m = Array2::from_shape_fn((16, 6), |(r, _)| if r > 4 { 1.0 } else { 0.0 });
    assert_eq!(bio.predict(&m), bio_back.predict(&m));
    assert!(BioNet::<f64>::load(&dir.path().join("b.ckpt")).is_err());
}

#[test]
fn segmentation_handles_unaligned_sizes() {
    let model = BioNet::<f64>::new(tiny(Variant::Full), 1).unwrap();
    let probe = BScan::new(sample(13, 11, 3, 8).image, Pitches::default()).unwrap();
    let seg = segment_choroid(&probe, &model).unwrap();
    assert_eq!(seg.choroid.dim(), (13, 11));
    assert_eq!(seg.layers.unwrap().dim(), (13, 11));
    assert_eq!(seg.empty, seg.choroid.is_empty());
    assert_eq!(seg.thickness.is_none(), seg.empty);
}

#[test]
fn overfits_a_band() {
    let data: Vec<SegSample<f64>> = (0..2).map(|k| sample(16, 16, 4 + k, 11)).collect();
    let mut c = quick_train(150);
    c.initial_lr = 0.02;
    let config = BioNetConfig { base_channels: 4, ..tiny(Variant::Baseline) };
    let (model, report) = train_bionet(&data, None, &config, &c).unwrap();
    let last = report.epochs.last().unwrap();
    assert!(last.val_dice.unwrap() > 0.95, "{last:?}");
    let seg = segment_choroid(&BScan::new(data[0].image.clone(), Pitches::default()).unwrap(), &model).unwrap();
    let gt = RegionMask::new(data[0].choroid.clone());
    let di = crate::metrics::seg_scores::<f64>(&seg.choroid, &gt).unwrap().di;
    assert!(di > 0.95, "{di}");
}
