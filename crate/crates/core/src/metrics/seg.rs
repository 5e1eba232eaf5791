use crate::error::{Error, Result};
use crate::oct::{BoundaryCurve, RegionMask, EMPTY_ROW};
use crate::scalar::Scalar;

/// Region overlap scores; `boundaries` is filled by [`choroid_scores`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegScores<T> {
    pub di: T,
    pub iou: T,
    pub acc: T,
    pub sen: T,
    pub boundaries: Option<BoundaryErrors<T>>,
}

/// Mean unsigned boundary error (pixels) with the fraction of columns it covers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ausde<T> {
    pub mean: T,
    pub coverage: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryErrors<T> {
    /// Upper choroid boundary (Bruch's membrane).
    pub bm: Ausde<T>,
    /// Lower choroid boundary (choroid-sclera interface).
    pub csi: Ausde<T>,
}

impl<T: Scalar> BoundaryErrors<T> {
    pub fn combined(&self) -> T {
        (self.bm.mean + self.csi.mean) * T::lit(0.5)
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(&[a.0, a.1], &[b.0, b.1]));
    }
    Ok(())
}

fn ratio<T: Scalar>(num: usize, den: usize, empty: f64) -> T {
    if den == 0 {
        T::lit(empty)
    } else {
        T::lit(num as f64 / den as f64)
    }
}

pub fn seg_scores<T: Scalar>(pred: &RegionMask, gt: &RegionMask) -> Result<SegScores<T>> {
    check_dims(gt.dim(), pred.dim())?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.mask().iter().zip(gt.mask().iter()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(SegScores {
        di: ratio(2 * tp, 2 * tp + fp + fn_, 1.0),
        iou: ratio(tp, tp + fp + fn_, 1.0),
        acc: ratio(tp + tn, tp + tn + fp + fn_, 1.0),
        sen: ratio(tp, tp + fn_, 1.0),
        boundaries: None,
    })
}

pub fn ausde<T: Scalar>(pred: &BoundaryCurve<T>, gt: &BoundaryCurve<T>) -> Result<Ausde<T>> {
    if pred.len() != gt.len() {
        return Err(Error::shape(&[gt.len()], &[pred.len()]));
    }
    let mut sum = 0.0;
    let mut valid = 0usize;
    for (&p, &g) in pred.rows().iter().zip(gt.rows().iter()) {
        if BoundaryCurve::is_sentinel(p) || BoundaryCurve::is_sentinel(g) {
            continue;
        }
        sum += (p - g).abs().as_f64();
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::Data("ausde: no column has both boundaries defined".into()));
    }
    Ok(Ausde { mean: T::lit(sum / valid as f64), coverage: ratio(valid, pred.len(), 0.0) })
}

/// Upper (first foreground row) and lower (one past last foreground row) boundaries per column.
/// Unlike strict boundary extraction this tolerates columns with several runs.
pub fn envelope_boundaries<T: Scalar>(mask: &RegionMask) -> Result<(BoundaryCurve<T>, BoundaryCurve<T>)> {
    let (h, w) = mask.dim();
    let mut upper = vec![T::lit(EMPTY_ROW); w];
    let mut lower = vec![T::lit(EMPTY_ROW); w];
    for c in 0..w {
        let col = mask.mask().column(c);
        if let Some(first) = (0..h).find(|&r| col[r]) {
            let last = (0..h).rev().find(|&r| col[r]).unwrap_or(first);
            upper[c] = T::from_usize_lossy(first);
            lower[c] = T::from_usize_lossy(last + 1);
        }
    }
    Ok((BoundaryCurve::new(upper)?, BoundaryCurve::new(lower)?))
}

/// Region scores plus BM/CSI boundary errors derived from the mask envelopes.
/// Boundary errors are `None` when no column is foreground in both masks.
pub fn choroid_scores<T: Scalar>(pred: &RegionMask, gt: &RegionMask) -> Result<SegScores<T>> {
    let mut scores = seg_scores(pred, gt)?;
    let (pu, pl) = envelope_boundaries::<T>(pred)?;
    let (gu, gl) = envelope_boundaries::<T>(gt)?;
    scores.boundaries = match (ausde(&pu, &gu), ausde(&pl, &gl)) {
        (Ok(bm), Ok(csi)) => Some(BoundaryErrors { bm, csi }),
        _ => None,
    };
    Ok(scores)
}

/// Area under the ROC curve (Mann-Whitney statistic, ties count half).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(&[scores.len()], &[labels.len()]));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("roc_auc needs both positive and negative labels".into()));
    }
    // average ranks over ties
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg_rank * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}
