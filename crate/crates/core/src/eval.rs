//! Precision, recall and F-measure under greedy rotated-IoU matching.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{rotated_iou, RotatedRect};
use crate::pipeline::{detection_order, Detection};

/// Which detection matched which ground-truth box.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(detection index, gt index, iou)` for every true positive.
    pub pairs: Vec<(usize, usize, f64)>,
    pub num_detections: usize,
    pub num_gt: usize,
}

impl Assignment {
    pub fn true_positives(&self) -> usize {
        self.pairs.len()
    }
}

/// Greedy one-to-one matching. Detections are visited by descending score
/// (ties by lexicographic corners); each takes the unmatched ground-truth box
/// with the highest IoU, provided that IoU reaches `iou_threshold`.
pub fn match_detections(dets: &[Detection], gts: &[RotatedRect], iou_threshold: f64) -> Assignment {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| detection_order(dets[i].score, &dets[i].rect, dets[j].score, &dets[j].rect));
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = rotated_iou(&dets[i].rect, gt);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            taken[j] = true;
            pairs.push((i, j, iou));
        }
    }
    Assignment {
        pairs,
        num_detections: dets.len(),
        num_gt: gts.len(),
    }
}

/// Counts and rates for one image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

impl ImageReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let (precision, recall, f_measure) = rates(tp, fp, fn_);
        Self {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            precision,
            recall,
            f_measure,
        }
    }
}

/// Aggregate report with a per-image breakdown.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub per_image: Vec<ImageReport>,
}

/// P, R, F from counts. Precision is 0 without detections and recall is 0
/// without ground truth.
pub fn rates(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Report for a single image.
pub fn report(assignment: &Assignment, iou_threshold: f64) -> EvalReport {
    let tp = assignment.true_positives();
    let image = ImageReport::from_counts(tp, assignment.num_detections - tp, assignment.num_gt - tp);
    aggregate(&[image], iou_threshold)
}

/// Sums per-image counts; rates are recomputed from the totals.
pub fn aggregate(images: &[ImageReport], iou_threshold: f64) -> EvalReport {
    let tp = images.iter().map(|r| r.true_positives).sum();
    let fp = images.iter().map(|r| r.false_positives).sum();
    let fn_ = images.iter().map(|r| r.false_negatives).sum();
    let (precision, recall, f_measure) = rates(tp, fp, fn_);
    EvalReport {
        iou_threshold,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        precision,
        recall,
        f_measure,
        per_image: images.to_vec(),
    }
}

/// Evaluates many images in parallel; the result does not depend on scheduling.
pub fn evaluate_images(images: &[(Vec<Detection>, Vec<RotatedRect>)], iou_threshold: f64) -> EvalReport {
    let per_image: Vec<ImageReport> = images
        .par_iter()
        .map(|(dets, gts)| {
            let a = match_detections(dets, gts, iou_threshold);
            let tp = a.true_positives();
            ImageReport::from_counts(tp, dets.len() - tp, gts.len() - tp)
        })
        .collect();
    aggregate(&per_image, iou_threshold)
}
