use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::{Augment, Transform};
use super::config::{lr_at, TrainConfig};
use crate::error::{Error, Result};
use crate::oct::io::write_atomic;
use crate::seeds;

const STREAM_TRAIN: u64 = 0x0074_7261_696e;

/// Loss of one batch: the weighted total and its named parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub components: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub dice: Option<f64>,
}

/// A model the generic loop can train on samples of type `S`.
pub trait Trainable<S> {
    /// Names of the entries of [`LossReport::components`].
    fn loss_names(&self) -> Vec<&'static str>;
    /// Forward and backward pass over `batch`, accumulating parameter gradients.
    fn train_batch(&mut self, batch: &[S]) -> Result<LossReport>;
    /// Optimizer update with the accumulated gradients.
    fn step(&mut self, lr: f64);
    fn evaluate(&self, samples: &[S]) -> Result<Evaluation>;
    /// Serialized trainable weights; used to keep the best epoch in memory.
    fn snapshot(&self) -> Result<Vec<u8>>;
    fn restore(&mut self, snapshot: &[u8]) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub components: Vec<f64>,
    pub val_loss: f64,
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss_names: Vec<&'static str>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    /// Checkpoint written for the best epoch, if a checkpoint directory was configured.
    pub checkpoint: Option<PathBuf>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl TrainReport {
    /// `epoch,loss_total,<components...>,val_loss,val_dice`
    pub fn csv(&self) -> String {
        let mut s = String::from("epoch,loss_total");
        for n in &self.loss_names {
            let _ = write!(s, ",{n}");
        }
        s.push_str(",val_loss,val_dice\n");
        for e in &self.epochs {
            let _ = write!(s, "{},{}", e.epoch, e.loss_total);
            for c in &e.components {
                let _ = write!(s, ",{c}");
            }
            let dice = e.val_dice.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(s, ",{},{dice}", e.val_loss);
        }
        s
    }
}

/// Seeded train/validation split; with no held-out samples validation reuses the training set.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(seed, STREAM_TRAIN, 1)));
    let n_val = ((n as f64) * val_fraction).floor() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

fn check_finite(report: &LossReport, names: &[&'static str], epoch: usize) -> Result<()> {
    for (name, v) in names.iter().zip(&report.components) {
        if !v.is_finite() {
            return Err(Error::Divergence(format!("loss term '{name}' became {v} at epoch {epoch}")));
        }
    }
    if !report.total.is_finite() {
        return Err(Error::Divergence(format!("total loss became {} at epoch {epoch}", report.total)));
    }
    Ok(())
}

/// Trains `model`, keeping the weights of the epoch with the lowest validation loss.
/// When `config.checkpoint_dir` is set, writes `<name>.ckpt`-style output via `save` and `<name>_log.csv`.
pub fn train<S, M>(
    model: &mut M,
    samples: &[S],
    config: &TrainConfig,
    name: &str,
    save: impl Fn(&M, &std::path::Path, usize) -> Result<()>,
) -> Result<TrainReport>
where
    S: Augment + Clone,
    M: Trainable<S>,
{
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("training needs at least one sample".into()));
    }
    let names = model.loss_names();
    let (train_idx, val_idx) = split_indices(samples.len(), config.val_fraction, config.seed);
    let val: Vec<S> = if val_idx.is_empty() {
        train_idx.iter().map(|&i| samples[i].clone()).collect()
    } else {
        val_idx.iter().map(|&i| samples[i].clone()).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, STREAM_TRAIN, 2));
    let mut order = train_idx.clone();
    let mut epochs = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(usize, f64, Vec<u8>)> = None;
    for epoch in 0..config.max_epochs {
        let lr = lr_at(config, epoch);
        order.shuffle(&mut rng);
        let mut sum_total = 0.0;
        let mut sum_parts = vec![0.0; names.len()];
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<S> = chunk
                .iter()
                .map(|&i| {
                    let s = samples[i].transformed(&Transform::draw(&config.augmentation, &mut rng));
                    match config.crop_width {
                        Some(cw) if cw < s.width() => {
                            let x0 = rng.random_range(0..=s.width() - cw);
                            s.crop_columns(x0, cw)
                        }
                        _ => s,
                    }
                })
                .collect();
            let report = model.train_batch(&batch)?;
            check_finite(&report, &names, epoch)?;
            model.step(lr);
            sum_total += report.total;
            for (acc, v) in sum_parts.iter_mut().zip(&report.components) {
                *acc += v;
            }
            batches += 1;
        }
        let eval = model.evaluate(&val)?;
        let denom = batches.max(1) as f64;
        log::debug!("{name} epoch {epoch}: loss {:.5} val {:.5} dice {:?}", sum_total / denom, eval.loss, eval.dice);
        epochs.push(EpochLog {
            epoch,
            lr,
            loss_total: sum_total / denom,
            components: sum_parts.iter().map(|v| v / denom).collect(),
            val_loss: eval.loss,
            val_dice: eval.dice,
        });
        if eval.loss.is_finite() && best.as_ref().is_none_or(|b| eval.loss < b.1) {
            best = Some((epoch, eval.loss, model.snapshot()?));
        }
    }
    let (best_epoch, best_val_loss) = match &best {
        Some((e, l, snap)) => {
            model.restore(snap)?;
            (Some(*e), *l)
        }
        None => (None, f64::INFINITY),
    };
    let mut report = TrainReport {
        loss_names: names,
        epochs,
        best_epoch,
        best_val_loss,
        checkpoint: None,
        train_indices: train_idx,
        val_indices: val_idx,
    };
    if let Some(dir) = &config.checkpoint_dir {
        let path = dir.join(format!("{name}.ckpt"));
        save(model, &path, best_epoch.unwrap_or(0))?;
        write_atomic(&dir.join(format!("{name}_log.csv")), report.csv().as_bytes())?;
        report.checkpoint = Some(path);
    }
    Ok(report)
}
