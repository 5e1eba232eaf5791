//! Training objectives of the segmentation model.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::biomarker::BiomarkerNet;
use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};
use crate::oct::LAYER_COUNT;
use crate::scalar::Scalar;

/// Probability floor inside logarithms.
pub const CE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub multilayers: f64,
    pub choroid: f64,
    pub bio: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { multilayers: 1.0, choroid: 1.0, bio: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("multilayers", self.multilayers), ("choroid", self.choroid), ("bio", self.bio)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss_weights.{k}"), format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `λ1·multilayers + λ2·choroid + λ3·bio` on plain numbers.
pub fn total_loss<T: Scalar>(parts: [T; 3], weights: &LossWeights) -> T {
    T::lit(weights.multilayers) * parts[0] + T::lit(weights.choroid) * parts[1] + T::lit(weights.bio) * parts[2]
}

/// The same weighted sum on the graph; absent terms contribute nothing.
pub fn total_loss_var<T: Scalar>(g: &mut Graph<T>, parts: [Option<Var>; 3], weights: &LossWeights) -> Result<Var> {
    let ws = [weights.multilayers, weights.choroid, weights.bio];
    let mut acc: Option<Var> = None;
    for (p, w) in parts.into_iter().zip(ws) {
        if let Some(p) = p {
            let t = g.scale(p, T::lit(w));
            acc = Some(match acc {
                Some(a) => g.add(a, t),
                None => t,
            });
        }
    }
    acc.ok_or_else(|| Error::Precondition("total loss needs at least one term".into()))
}

fn check_probabilities<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    match t.data().iter().find(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
        Some(v) => Err(Error::Data(format!("{what} holds {} outside [0, 1]", v.as_f64()))),
        None => Ok(()),
    }
}

/// Mean categorical cross-entropy of softmax probabilities `(n, 12, h, w)` against one-hot labels.
pub fn multilayer_loss<T: Scalar>(g: &mut Graph<T>, g_pred: Var, g_gt: Tensor<T>) -> Result<Var> {
    let p = g.value(g_pred);
    if p.shape() != g_gt.shape() {
        return Err(Error::shape(&p.shape(), &g_gt.shape()));
    }
    check_probabilities(p, "layer probabilities")?;
    check_probabilities(&g_gt, "layer targets")?;
    Ok(g.categorical_ce(g_pred, g_gt, T::lit(CE_EPS)))
}

/// Mean binary cross-entropy between the choroid probability map and its binary target.
pub fn choroid_loss<T: Scalar>(g: &mut Graph<T>, c_pred: Var, c_gt: Tensor<T>) -> Result<Var> {
    let p = g.value(c_pred);
    if p.shape() != c_gt.shape() {
        return Err(Error::shape(&p.shape(), &c_gt.shape()));
    }
    check_probabilities(p, "choroid probabilities")?;
    Ok(g.bce(c_pred, c_gt, T::lit(CE_EPS)))
}

fn mean_abs_to<T: Scalar>(g: &mut Graph<T>, b: Var, target: &[T]) -> Result<Var> {
    let n = g.value(b).shape()[0];
    if target.len() != n {
        return Err(Error::shape(&[n], &[target.len()]));
    }
    let t = g.input(Tensor::from_vec([n, 1, 1, 1], target.to_vec())?);
    let d = g.sub(b, t);
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

/// Regression loss of the biomarker network: mean over samples of `|B_pred - B_gt|`.
pub fn bio_regression_loss<T: Scalar>(g: &mut Graph<T>, b_pred: Var, b_gt: &[T]) -> Result<Var> {
    mean_abs_to(g, b_pred, b_gt)
}

/// Biomarker consistency: mean over the batch of `|B(C_pred) - B_ref|` through a frozen network.
pub fn bio_consistency_loss<T: Scalar>(g: &mut Graph<T>, c_pred: Var, bio: &BiomarkerNet<T>, b_ref: &[T]) -> Result<Var> {
    if !bio.is_frozen() {
        return Err(Error::Precondition("biomarker network must be frozen before it regularizes segmentation".into()));
    }
    let (_, b) = bio.forward(g, c_pred);
    mean_abs_to(g, b, b_ref)
}

/// `B_ref`: the frozen network applied to ground-truth masks `(n, 1, h, w)`.
pub fn bio_reference<T: Scalar>(bio: &BiomarkerNet<T>, gt_masks: &Tensor<T>) -> Vec<T> {
    let mut g = Graph::new();
    let x = g.input(gt_masks.clone());
    let (_, b) = bio.forward(&mut g, x);
    g.value(b).data().to_vec()
}

/// One-hot `(n, 12, h, w)` encoding of label maps.
pub fn one_hot<T: Scalar>(labels: &[&Array2<u8>]) -> Result<Tensor<T>> {
    let (h, w) = labels.first().map(|l| l.dim()).ok_or_else(|| Error::Data("empty batch".into()))?;
    let mut t = Tensor::zeros([labels.len(), LAYER_COUNT, h, w]);
    for (n, l) in labels.iter().enumerate() {
        if l.dim() != (h, w) {
            return Err(Error::shape(&[h, w], &[l.nrows(), l.ncols()]));
        }
        for ((r, c), &k) in l.indexed_iter() {
            if k as usize >= LAYER_COUNT {
                return Err(Error::Data(format!("layer label {k} out of range")));
            }
            t.set([n, k as usize, r, c], T::one());
        }
    }
    Ok(t)
}
