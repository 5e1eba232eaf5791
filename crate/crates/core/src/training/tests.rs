use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint;
use super::*;
use crate::error::{Error, Result};
use crate::nn::{Adam, Conv2d, Graph, ParamStore, Tensor};

#[derive(Debug, Clone)]
struct Toy {
    image: Array2<f64>,
    mask: Array2<f64>,
}

impl Augment for Toy {
    fn transformed(&self, t: &Transform) -> Self {
        Toy { image: t.apply_image(&self.image), mask: t.apply_labels(&self.mask) }
    }
    fn width(&self) -> usize {
        self.image.ncols()
    }
    fn crop_columns(&self, x0: usize, width: usize) -> Self {
        let s = ndarray::s![.., x0..x0 + width];
        Toy { image: self.image.slice(s).to_owned(), mask: self.mask.slice(s).to_owned() }
    }
}

fn to_tensor(a: &Array2<f64>) -> Tensor<f64> {
    let (h, w) = a.dim();
    Tensor::from_vec([1, 1, h, w], a.iter().copied().collect()).unwrap()
}

struct ToyModel {
    store: ParamStore<f64>,
    conv: Conv2d,
    adam: Adam<f64>,
    poison: bool,
}

impl ToyModel {
    fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let conv = Conv2d::same3(&mut store, "toy", 1, 1, &mut ChaCha8Rng::seed_from_u64(seed));
        Self { store, conv, adam: Adam::new(0.9, 0.999), poison: false }
    }

    fn loss(&self, s: &Toy) -> (Graph<f64>, crate::nn::Var, f64) {
        let mut g = Graph::new();
        let x = g.input(to_tensor(&s.image));
        let z = self.conv.forward(&mut g, &self.store, x);
        let p = g.sigmoid(z);
        let l = g.bce(p, to_tensor(&s.mask), 1e-7);
        let v = g.value(l).data()[0];
        (g, l, v)
    }
}

impl Trainable<Toy> for ToyModel {
    fn loss_names(&self) -> Vec<&'static str> {
        vec!["bce"]
    }
    fn train_batch(&mut self, batch: &[Toy]) -> Result<LossReport> {
        let mut total = 0.0;
        for s in batch {
            let (g, l, v) = self.loss(s);
            let grads = g.backward(l);
            self.store.accumulate(&g, &grads);
            total += v;
        }
        let total = if self.poison { f64::NAN } else { total / batch.len() as f64 };
        Ok(LossReport { total, components: vec![total] })
    }
    fn step(&mut self, lr: f64) {
        self.adam.step(&mut self.store, lr);
    }
    fn evaluate(&self, samples: &[Toy]) -> Result<Evaluation> {
        let loss = samples.iter().map(|s| self.loss(s).2).sum::<f64>() / samples.len() as f64;
        Ok(Evaluation { loss, dice: None })
    }
    fn snapshot(&self) -> Result<Vec<u8>> {
        checkpoint::encode("toy", 0, serde_json::Value::Null, &[&self.store])
    }
    fn restore(&mut self, snapshot: &[u8]) -> Result<()> {
        checkpoint::decode(snapshot)?.restore("toy", &mut [&mut self.store])
    }
}

fn toy_samples(n: usize) -> Vec<Toy> {
    (0..n)
        .map(|k| {
            let image = Array2::from_shape_fn((12, 16), |(r, c)| if (r + c + k) % 5 < 2 { 1.0 } else { 0.0 });
            let mask = image.clone();
            Toy { image, mask }
        })
        .collect()
}

fn quiet_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: 2,
        augmentation: AugmentConfig::none(),
        lr_drop_epochs: vec![],
        ..TrainConfig::default()
    }
}

fn no_save(_: &ToyModel, _: &std::path::Path, _: usize) -> Result<()> {
    Ok(())
}

#[test]
fn lr_schedule_drops_at_listed_epochs() {
    let c = TrainConfig::default();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1e-300);
    assert!(close(lr_at(&c, 0), 0.01));
    assert!(close(lr_at(&c, 39), 0.01));
    assert!(close(lr_at(&c, 40), 1e-3));
    assert!(close(lr_at(&c, 80), 1e-4));
    assert!(close(lr_at(&c, 159), 1e-4));
    assert!(close(lr_at(&c, 160), 1e-5));
    assert!(close(lr_at(&c, 240), 1e-6));
    assert!(close(lr_at(&c, 299), 1e-6));
}

#[test]
fn config_validation_names_the_key() {
    let mut c = TrainConfig::default();
    c.batch_size = 0;
    match c.validate() {
        Err(e @ Error::Config { .. }) => assert!(e.to_string().contains("train.batch_size"), "{e}"),
        other => panic!("expected config error, got {other:?}"),
    }
    let mut c = TrainConfig::default();
    c.optimizer.name = "sgd".into();
    assert!(c.validate().is_err());
}

#[test]
fn flip_twice_is_identity_and_zero_rotation_is_identity() {
    let img = Array2::from_shape_fn((7, 9), |(r, c)| (r * 31 + c * 7) as f64 % 11.0);
    let flip = Transform { flip: true, degrees: 0.0 };
    assert_eq!(flip.apply_image(&flip.apply_image(&img)), img);
    assert_eq!(Transform::IDENTITY.apply_image(&img), img);
    assert_eq!(Transform::IDENTITY.apply_labels(&img), img);
}

#[test]
fn flip_reverses_per_column_thickness() {
    let mask = Array2::from_shape_fn((10, 6), |(r, c)| u8::from(r < c + 2));
    let thick = |m: &Array2<u8>| -> Vec<usize> { m.columns().into_iter().map(|c| c.iter().filter(|&&v| v == 1).count()).collect() };
    let before = thick(&mask);
    let after = thick(&Transform { flip: true, degrees: 0.0 }.apply_labels(&mask));
    let mut rev = before.clone();
    rev.reverse();
    assert_eq!(after, rev);
}

#[test]
fn small_rotation_of_labels_stays_label_valued() {
    let mask = Array2::from_shape_fn((20, 20), |(r, _)| u8::from((6..14).contains(&r)));
    let out = Transform { flip: false, degrees: 7.0 }.apply_labels(&mask);
    assert!(out.iter().all(|&v| v <= 1));
    let frac = out.iter().filter(|&&v| v == 1).count() as f64 / 400.0;
    assert!((frac - 0.4).abs() < 0.08, "{frac}");
}

#[test]
fn checkpoint_round_trip_and_header() {
    let model = ToyModel::new(3);
    let bytes = checkpoint::encode("toy", 7, serde_json::json!({"k": 1}), &[&model.store]).unwrap();
    assert_eq!(&bytes[..8], checkpoint::MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), checkpoint::FORMAT_VERSION);
    let ck = checkpoint::decode::<f64>(&bytes).unwrap();
    assert_eq!(ck.meta.epoch, 7);
    let mut other = ToyModel::new(99);
    ck.restore("toy", &mut [&mut other.store]).unwrap();
    for (a, b) in model.store.values().iter().zip(other.store.values()) {
        assert_eq!(a.data(), b.data());
    }
    assert!(checkpoint::decode::<f32>(&bytes).is_err(), "dtype tag must be checked");
    assert!(ck.restore("other", &mut [&mut other.store]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::decode::<f64>(&bad).is_err());
    assert!(checkpoint::decode::<f64>(&bytes[..bytes.len() - 1]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    checkpoint::save(&path, "toy", 1, serde_json::Value::Null, &[&model.store]).unwrap();
    assert_eq!(checkpoint::load::<f64>(&path).unwrap().values.len(), model.store.len());
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let mut model = ToyModel::new(5);
    let before: Vec<Vec<f64>> = model.store.values().iter().map(|t| t.data().to_vec()).collect();
    let mut c = quiet_config(1);
    c.initial_lr = 0.0;
    train(&mut model, &toy_samples(4), &c, "toy", no_save).unwrap();
    let after: Vec<Vec<f64>> = model.store.values().iter().map(|t| t.data().to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn overfits_two_samples() {
    let mut model = ToyModel::new(11);
    let mut c = quiet_config(400);
    c.initial_lr = 0.1;
    c.val_fraction = 0.0;
    let report = train(&mut model, &toy_samples(2), &c, "toy", no_save).unwrap();
    assert!(report.best_val_loss < 1e-2, "final loss {}", report.best_val_loss);
    assert!(report.epochs[0].loss_total > report.best_val_loss);
}

#[test]
fn divergence_names_the_loss_term() {
    let mut model = ToyModel::new(1);
    model.poison = true;
    match train(&mut model, &toy_samples(4), &quiet_config(2), "toy", no_save) {
        Err(Error::Divergence(msg)) => assert!(msg.contains("bce"), "{msg}"),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn holdout_split_is_disjoint_and_seeded() {
    let (t, v) = split_indices(50, 0.1, 4);
    assert_eq!(v.len(), 5);
    assert_eq!(t.len(), 45);
    let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..50).collect::<Vec<_>>());
    assert_eq!(split_indices(50, 0.1, 4), (t, v));
    assert_ne!(split_indices(50, 0.1, 5).1, split_indices(50, 0.1, 4).1);
}

#[test]
fn log_and_checkpoint_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = quiet_config(3);
    c.crop_width = Some(8);
    c.checkpoint_dir = Some(dir.path().to_path_buf());
    let mut model = ToyModel::new(2);
    let report = train(&mut model, &toy_samples(10), &c, "toy", |m, p, e| {
        checkpoint::save(p, "toy", e, serde_json::Value::Null, &[&m.store])
    })
    .unwrap();
    let csv = std::fs::read_to_string(dir.path().join("toy_log.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,loss_total,bce,val_loss,val_dice"));
    assert_eq!(lines.count(), 3);
    assert!(report.checkpoint.unwrap().exists());
}
