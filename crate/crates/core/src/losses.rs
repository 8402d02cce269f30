//! Training objective with analytic gradients.
//!
//! `L = L_conf / N_c + lambda1 * L_loc / N_c + lambda2 * L_seg / N_s`, where the
//! confidence term is a two-way softmax cross-entropy over hard-negative-mined
//! samples, the localization term is Smooth L1 over matched offsets and the
//! segmentation term is the Dice loss.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};

/// Negatives kept per positive by hard negative mining.
pub const OHEM_NEG_RATIO: usize = 3;
/// Negatives kept when a batch has no positives.
pub const OHEM_ZERO_POSITIVE_FLOOR: usize = 16;
/// Smoothing added to the Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-6;
/// Smooth L1 switches from quadratic to linear at this absolute difference.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OhemSelection {
    /// Selected sample indices in ascending order.
    pub indices: Vec<usize>,
    pub num_positive: usize,
    pub num_negative: usize,
    /// Set when the batch had no positives and the floor rule applied.
    pub zero_positive: bool,
}

fn hardest_first(losses: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b))
}

/// Online hard negative mining: every positive plus the
/// `min(ratio * |pos|, |neg|)` highest-loss negatives. Ties go to the lower index.
pub fn ohem_select(losses: &[f64], labels: &[bool], ratio: usize) -> Result<OhemSelection> {
    if losses.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} losses but {} labels",
            losses.len(),
            labels.len()
        )));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l {
            positives.push(i);
        } else {
            negatives.push(i);
        }
    }
    let zero_positive = positives.is_empty();
    let want = if zero_positive {
        OHEM_ZERO_POSITIVE_FLOOR.max(1)
    } else {
        ratio.saturating_mul(positives.len())
    };
    let k = want.min(negatives.len());
    if k > 0 && k < negatives.len() {
        negatives.select_nth_unstable_by(k - 1, hardest_first(losses));
    }
    negatives.truncate(k);

    let mut indices = positives.clone();
    indices.extend_from_slice(&negatives);
    indices.sort_unstable();
    Ok(OhemSelection {
        num_positive: positives.len(),
        num_negative: k,
        indices,
        zero_positive,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<G> {
    pub value: f64,
    pub grad: G,
}

/// Per-sample two-way softmax cross-entropy of logits `scores[i]` against `labels[i]`.
pub fn per_sample_cross_entropy(scores: &[[f64; 2]], labels: &[bool]) -> Vec<f64> {
    scores
        .iter()
        .zip(labels)
        .map(|(s, &y)| {
            let m = s[0].max(s[1]);
            let lse = m + ((s[0] - m).exp() + (s[1] - m).exp()).ln();
            lse - s[y as usize]
        })
        .collect()
}

/// Mean softmax cross-entropy over the selected samples, with its gradient
/// with respect to every logit (zero for unselected rows).
pub fn conf_loss(scores: &[[f64; 2]], labels: &[bool], selection: &[usize]) -> Result<LossGrad<Vec<[f64; 2]>>> {
    if scores.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} score rows but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if selection.is_empty() {
        return Err(Error::Config("confidence loss needs a non-empty selection".into()));
    }
    let n = selection.len() as f64;
    let mut grad = vec![[0.0; 2]; scores.len()];
    let mut total = 0.0;
    for &i in selection {
        let s = scores
            .get(i)
            .ok_or_else(|| Error::Config(format!("selection index {i} out of range")))?;
        let m = s[0].max(s[1]);
        let e0 = (s[0] - m).exp();
        let e1 = (s[1] - m).exp();
        let z = e0 + e1;
        let y = labels[i] as usize;
        total += m + z.ln() - s[y];
        let p = [e0 / z, e1 / z];
        for c in 0..2 {
            let target = if c == y { 1.0 } else { 0.0 };
            grad[i][c] += (p[c] - target) / n;
        }
    }
    Ok(LossGrad { value: total / n, grad })
}

/// Smooth L1 of a single difference and its derivative.
#[inline]
pub fn smooth_l1(d: f64) -> (f64, f64) {
    let a = d.abs();
    if a < SMOOTH_L1_BETA {
        (0.5 * d * d / SMOOTH_L1_BETA, d / SMOOTH_L1_BETA)
    } else {
        (a - 0.5 * SMOOTH_L1_BETA, d.signum())
    }
}

/// Summed elementwise Smooth L1 of `pred - target` over all offsets; the
/// gradient is with respect to `pred`. Normalization by `N_c` happens in
/// [`total_loss`].
pub fn loc_loss(pred: &[[f64; 4]], target: &[[f64; 4]]) -> Result<LossGrad<Vec<[f64; 4]>>> {
    if pred.len() != target.len() {
        return Err(Error::Config(format!(
            "{} predicted offsets but {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let mut g = [0.0; 4];
            for k in 0..4 {
                let (v, dv) = smooth_l1(p[k] - t[k]);
                value += v;
                g[k] = dv;
            }
            g
        })
        .collect();
    Ok(LossGrad { value, grad })
}

/// Dice loss `1 - (2 * sum(y * p) + eps) / (sum(y) + sum(p) + eps)` over the
/// whole batch, with its gradient with respect to `pred`.
pub fn dice_loss(pred: &[f64], label: &[f64]) -> Result<LossGrad<Vec<f64>>> {
    if pred.len() != label.len() {
        return Err(Error::Config(format!(
            "{} predictions but {} labels",
            pred.len(),
            label.len()
        )));
    }
    if let Some(i) = pred.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config(format!("prediction {i} = {} outside [0, 1]", pred[i])));
    }
    let (mut inter, mut sy, mut sp) = (0.0, 0.0, 0.0);
    for (&p, &y) in pred.iter().zip(label) {
        inter += y * p;
        sy += y;
        sp += p;
    }
    let num = 2.0 * inter + DICE_EPS;
    let den = sy + sp + DICE_EPS;
    let value = 1.0 - num / den;
    let den2 = den * den;
    let grad = label.iter().map(|&y| -(2.0 * y * den - num) / den2).collect();
    Ok(LossGrad { value, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Number of positive default boxes.
    pub num_positive: usize,
    /// Number of pixels in the segmentation maps.
    pub num_pixels: usize,
}

impl LossWeights {
    pub fn new(num_positive: usize, num_pixels: usize) -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 10.0,
            num_positive,
            num_pixels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TotalLoss {
    pub conf_term: f64,
    pub loc_term: f64,
    pub seg_term: f64,
    pub value: f64,
    /// Set when `N_c = 0` and the corner terms were taken as zero.
    pub zero_positive: bool,
}

/// Weighted combination of the three component losses.
pub fn total_loss(conf: f64, loc: f64, seg: f64, w: &LossWeights) -> Result<TotalLoss> {
    if !(w.lambda1 > 0.0 && w.lambda2 > 0.0) {
        return Err(Error::Config("loss weights must be positive".into()));
    }
    if w.num_pixels == 0 {
        return Err(Error::Config("segmentation pixel count must be positive".into()));
    }
    let zero_positive = w.num_positive == 0;
    let (conf_term, loc_term) = if zero_positive {
        (0.0, 0.0)
    } else {
        let nc = w.num_positive as f64;
        (conf / nc, w.lambda1 * loc / nc)
    };
    let seg_term = w.lambda2 * seg / w.num_pixels as f64;
    Ok(TotalLoss {
        conf_term,
        loc_term,
        seg_term,
        value: conf_term + loc_term + seg_term,
        zero_positive,
    })
}
