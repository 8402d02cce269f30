//! Inference: corner decoding, sampling and grouping, rotated position-sensitive
//! ROI average pooling, score filtering and rotated NMS.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, AxisAlignedBox, Point, RotatedRect};
use crate::targets::{
    decode_offsets, offset_channel, pixel_span, score_channel, CornerType, DefaultBox, DefaultBoxConfig, LayerMaps,
    OffsetTarget,
};
use crate::tensorio::{CornerRecord, Tensor3D};

/// Inference thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Corners with softmax score above this are kept.
    pub corner_score_threshold: f64,
    /// Axis-aligned IoU for NMS among corner squares of one type.
    pub corner_nms_iou: f64,
    /// Both sides of a grouped box must exceed this (pixels).
    pub min_short_side: f64,
    /// Largest allowed ratio between the short sides predicted for a pair.
    pub ss_ratio_max: f64,
    /// Position-sensitive grid order.
    pub g: usize,
    /// Candidates need a segmentation score above this.
    pub tau: f64,
    /// Rotated IoU for the final NMS.
    pub final_nms_iou: f64,
    /// Worker threads for candidate scoring; 1 scores sequentially.
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corner_score_threshold: 0.5,
            corner_nms_iou: 0.3,
            min_short_side: 5.0,
            ss_ratio_max: 1.5,
            g: 2,
            tau: 0.6,
            final_nms_iou: 0.3,
            threads: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("corner_score_threshold", self.corner_score_threshold)?;
        unit("corner_nms_iou", self.corner_nms_iou)?;
        unit("tau", self.tau)?;
        unit("final_nms_iou", self.final_nms_iou)?;
        if !(self.min_short_side >= 0.0) {
            return Err(Error::Config(format!(
                "min_short_side = {} is negative",
                self.min_short_side
            )));
        }
        if !(self.ss_ratio_max >= 1.0) {
            return Err(Error::Config(format!("ss_ratio_max = {} below 1", self.ss_ratio_max)));
        }
        if self.g == 0 {
            return Err(Error::Config("g must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// One decoded corner candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerDetection {
    pub corner_type: CornerType,
    pub position: Point,
    pub short_side: f64,
    pub score: f64,
}

impl CornerDetection {
    pub fn square(&self) -> AxisAlignedBox {
        AxisAlignedBox::square(self.position, self.short_side)
    }

    pub fn to_record(&self) -> CornerRecord {
        CornerRecord {
            corner_type: self.corner_type,
            x: self.position.x,
            y: self.position.y,
            ss: self.short_side,
            score: self.score,
        }
    }

    pub fn from_record(r: &CornerRecord) -> Result<Self> {
        if !(r.ss > 0.0) || !r.x.is_finite() || !r.y.is_finite() || !r.ss.is_finite() {
            return Err(Error::InvalidBox(format!(
                "corner at ({}, {}) has invalid short side {}",
                r.x, r.y, r.ss
            )));
        }
        Ok(Self {
            corner_type: r.corner_type,
            position: Point::new(r.x, r.y),
            short_side: r.ss,
            score: r.score,
        })
    }
}

/// Corner detections split by type, indexed by [`CornerType::index`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CornerSets {
    pub sets: [Vec<CornerDetection>; 4],
}

impl CornerSets {
    pub fn from_detections(dets: impl IntoIterator<Item = CornerDetection>) -> Self {
        let mut out = Self::default();
        for d in dets {
            out.sets[d.corner_type.index()].push(d);
        }
        out
    }

    pub fn get(&self, t: CornerType) -> &[CornerDetection] {
        &self.sets[t.index()]
    }

    pub fn len(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &CornerDetection> {
        self.sets.iter().flatten()
    }
}

fn corner_order(a: &CornerDetection, b: &CornerDetection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.position.lex_cmp(&b.position))
        .then(a.short_side.total_cmp(&b.short_side))
}

/// Greedy NMS over corner squares (axis-aligned IoU), highest score first.
pub fn corner_nms(mut dets: Vec<CornerDetection>, iou_threshold: f64) -> Vec<CornerDetection> {
    dets.sort_by(corner_order);
    let squares: Vec<AxisAlignedBox> = dets.iter().map(CornerDetection::square).collect();
    let mut keep: Vec<usize> = Vec::new();
    for i in 0..dets.len() {
        if keep.iter().all(|&k| squares[k].iou(&squares[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep.into_iter().map(|i| dets[i]).collect()
}

/// Thresholds raw corners by score and runs per-type corner NMS.
pub fn filter_corners(dets: impl IntoIterator<Item = CornerDetection>, cfg: &PipelineConfig) -> CornerSets {
    let raw = CornerSets::from_detections(dets.into_iter().filter(|d| d.score > cfg.corner_score_threshold));
    CornerSets {
        sets: raw.sets.map(|s| corner_nms(s, cfg.corner_nms_iou)),
    }
}

fn softmax_positive(background: f32, corner: f32) -> f64 {
    let (b, c) = (background as f64, corner as f64);
    let m = b.max(c);
    let eb = (b - m).exp();
    let ec = (c - m).exp();
    ec / (eb + ec)
}

/// Decodes score and offset maps into thresholded, NMS-filtered corner sets.
pub fn decode_corners(maps: &[LayerMaps], boxes: &DefaultBoxConfig, cfg: &PipelineConfig) -> Result<CornerSets> {
    boxes.validate()?;
    if maps.len() != boxes.layers.len() {
        return Err(Error::Config(format!(
            "got maps for {} layers, default-box config has {}",
            maps.len(),
            boxes.layers.len()
        )));
    }
    let mut raw = Vec::new();
    for (li, (layer, lm)) in boxes.layers.iter().zip(maps).enumerate() {
        let (rows, cols) = boxes.grid_size(li);
        let k = layer.scales.len();
        if lm.scores.shape() != (k * 8, rows, cols) || lm.offsets.shape() != (k * 16, rows, cols) {
            return Err(Error::Config(format!(
                "layer {} expects score maps {}x{rows}x{cols} and offset maps {}x{rows}x{cols}, got {:?} and {:?}",
                layer.name,
                k * 8,
                k * 16,
                lm.scores.shape(),
                lm.offsets.shape()
            )));
        }
        let stride = layer.stride as f64;
        for row in 0..rows {
            for col in 0..cols {
                let center = Point::new((col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride);
                for (si, &side) in layer.scales.iter().enumerate() {
                    for t in CornerType::ALL {
                        let p = softmax_positive(
                            lm.scores.get(score_channel(si, t, 0), row, col),
                            lm.scores.get(score_channel(si, t, 1), row, col),
                        );
                        if p <= cfg.corner_score_threshold {
                            continue;
                        }
                        let off = |kk: usize| lm.offsets.get(offset_channel(si, t, kk), row, col) as f64;
                        let db = DefaultBox {
                            layer_index: li,
                            row,
                            col,
                            scale_index: si,
                            center,
                            side,
                        };
                        let sq = decode_offsets(&db, &OffsetTarget::from_array([off(0), off(1), off(2), off(3)]), t);
                        if !(sq.side > 0.0) || !sq.side.is_finite() {
                            continue;
                        }
                        raw.push(CornerDetection {
                            corner_type: t,
                            position: sq.center,
                            short_side: sq.side,
                            score: p,
                        });
                    }
                }
            }
        }
    }
    Ok(filter_corners(raw, cfg))
}

/// The four corner pairings used to build boxes, named by the edge they span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairKind {
    /// (TL, TR)
    Top,
    /// (TR, BR)
    Right,
    /// (BL, BR)
    Bottom,
    /// (TL, BL)
    Left,
}

impl PairKind {
    pub const ALL: [PairKind; 4] = [PairKind::Top, PairKind::Right, PairKind::Bottom, PairKind::Left];

    pub fn corner_types(self) -> (CornerType, CornerType) {
        use CornerType::*;
        match self {
            PairKind::Top => (TopLeft, TopRight),
            PairKind::Right => (TopRight, BottomRight),
            PairKind::Bottom => (BottomLeft, BottomRight),
            PairKind::Left => (TopLeft, BottomLeft),
        }
    }

    /// The ordering the pair must respect: `first < second` along x for the
    /// horizontal edges and along y for the vertical ones.
    pub fn order_holds(self, first: Point, second: Point) -> bool {
        match self {
            PairKind::Top | PairKind::Bottom => first.x < second.x,
            PairKind::Right | PairKind::Left => first.y < second.y,
        }
    }
}

/// Why a corner pair did not produce a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    RelativePosition,
    ShortSide,
    SideRatio,
}

/// Builds the rectangle spanned by one corner pair, or says which rule failed.
///
/// The pair fixes one edge; the opposite edge lies at distance
/// `mean(ss_a, ss_b)` on the interior side implied by the corner types.
pub fn group_pair(
    kind: PairKind,
    a: &CornerDetection,
    b: &CornerDetection,
    cfg: &PipelineConfig,
) -> std::result::Result<RotatedRect, Rejection> {
    if !kind.order_holds(a.position, b.position) {
        return Err(Rejection::RelativePosition);
    }
    let (s1, s2) = (a.short_side, b.short_side);
    if !(s1 > 0.0 && s2 > 0.0) || s1.max(s2) / s1.min(s2) > cfg.ss_ratio_max {
        return Err(Rejection::SideRatio);
    }
    let ss = 0.5 * (s1 + s2);
    let edge = b.position.sub(a.position);
    let len = edge.norm();
    if !(len.min(ss) > cfg.min_short_side) {
        return Err(Rejection::ShortSide);
    }
    let d = edge.scale(1.0 / len);
    let (p, q) = (a.position, b.position);
    let corners = match kind {
        // Interior is the clockwise normal of the TL->TR direction.
        PairKind::Top => {
            let n = Point::new(-d.y, d.x).scale(ss);
            [p, q, q.add(n), p.add(n)]
        }
        PairKind::Right => {
            let n = Point::new(-d.y, d.x).scale(ss);
            [p.add(n), p, q, q.add(n)]
        }
        PairKind::Bottom => {
            let n = Point::new(d.y, -d.x).scale(ss);
            [p.add(n), q.add(n), q, p]
        }
        PairKind::Left => {
            let n = Point::new(d.y, -d.x).scale(ss);
            [p, p.add(n), q.add(n), q]
        }
    };
    Ok(RotatedRect::from_corners(corners))
}

/// A grouped box awaiting or carrying its segmentation score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateBox {
    pub rect: RotatedRect,
    pub source_pair: PairKind,
    pub seg_score: f64,
}

/// Every pair of the four kinds that passes all three grouping rules.
pub fn sample_and_group(sets: &CornerSets, cfg: &PipelineConfig) -> Vec<CandidateBox> {
    let mut out = Vec::new();
    for kind in PairKind::ALL {
        let (ta, tb) = kind.corner_types();
        for a in sets.get(ta) {
            for b in sets.get(tb) {
                if let Ok(rect) = group_pair(kind, a, b, cfg) {
                    out.push(CandidateBox {
                        rect,
                        source_pair: kind,
                        seg_score: 0.0,
                    });
                }
            }
        }
    }
    out
}

/// Rotated position-sensitive ROI average pooling.
///
/// The box is split into `g x g` bins; bin `i` averages channel `i` of `seg`
/// over the pixels whose centers fall in that bin, and the score is the mean
/// of the bin averages. Bins without pixels contribute 0.
pub fn rps_roi_average_pool(rect: &RotatedRect, seg: &Tensor3D, g: usize) -> Result<f64> {
    let (channels, height, width) = seg.shape();
    if g == 0 || channels != g * g {
        return Err(Error::Config(format!(
            "segmentation has {channels} channels, grid order {g} needs {}",
            g * g
        )));
    }
    if !rect.is_finite() {
        return Err(Error::InvalidBox("non-finite box corner".into()));
    }
    let mut sums = vec![0.0f64; g * g];
    let mut counts = vec![0usize; g * g];
    if let Some((x0, x1, y0, y1)) = pixel_span(&rect.aabb(), height, width) {
        for py in y0..y1 {
            let y = py as f64 + 0.5;
            let Some((rx0, rx1)) = row_span(rect, y, x0, x1) else {
                continue;
            };
            for px in rx0..rx1 {
                if let Some(k) = rect.grid_cell(Point::new(px as f64 + 0.5, y), g) {
                    sums[k] += seg.get(k, py, px) as f64;
                    counts[k] += 1;
                }
            }
        }
    }
    let total: f64 = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .sum();
    Ok(total / (g * g) as f64)
}

/// Pixel columns of row `y` whose centers can lie in `rect`, widened by one
/// pixel on each side and clipped to `[x0, x1)`.
fn row_span(rect: &RotatedRect, y: f64, x0: usize, x1: usize) -> Option<(usize, usize)> {
    // Local coordinates are affine in x along the row: s(x) = s0 + ds * x.
    let (s0, t0) = rect.local_coords(Point::new(0.0, y));
    let (s1, t1) = rect.local_coords(Point::new(1.0, y));
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (base, slope) in [(s0, s1 - s0), (t0, t1 - t0)] {
        if !base.is_finite() || !slope.is_finite() {
            return Some((x0, x1));
        }
        if slope.abs() < 1e-15 {
            if !(-1e-6..=1.0 + 1e-6).contains(&base) {
                return None;
            }
            continue;
        }
        let a = (0.0 - base) / slope;
        let b = (1.0 - base) / slope;
        lo = lo.max(a.min(b));
        hi = hi.min(a.max(b));
    }
    if lo > hi + 2.0 {
        return None;
    }
    // Column px has its center at px + 0.5.
    let first = (lo - 0.5).floor() - 1.0;
    let last = (hi - 0.5).ceil() + 2.0;
    let first = first.clamp(x0 as f64, x1 as f64) as usize;
    let last = last.clamp(x0 as f64, x1 as f64) as usize;
    (first < last).then_some((first, last))
}

/// Scores every candidate and keeps those with score strictly above `tau`.
pub fn score_and_filter(
    candidates: &[CandidateBox],
    seg: &Tensor3D,
    cfg: &PipelineConfig,
) -> Result<Vec<CandidateBox>> {
    let score = |c: &CandidateBox| -> Result<CandidateBox> {
        Ok(CandidateBox {
            seg_score: rps_roi_average_pool(&c.rect, seg, cfg.g)?,
            ..*c
        })
    };
    let scored: Vec<CandidateBox> = if cfg.threads > 1 && candidates.len() > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot start scoring threads: {e}")))?;
        pool.install(|| candidates.par_iter().map(score).collect::<Result<Vec<_>>>())?
    } else {
        candidates.iter().map(score).collect::<Result<Vec<_>>>()?
    };
    Ok(scored.into_iter().filter(|c| c.seg_score > cfg.tau).collect())
}

/// Final output: a box and its segmentation score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub rect: RotatedRect,
    pub score: f64,
}

/// Descending score, then lexicographic corners.
pub fn detection_order(a_score: f64, a: &RotatedRect, b_score: f64, b: &RotatedRect) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| {
        a.corners
            .iter()
            .zip(&b.corners)
            .map(|(p, q)| p.lex_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Greedy rotated NMS: boxes are visited by descending score and dropped when
/// their IoU with an already kept box exceeds `iou_threshold`.
pub fn rotated_nms(boxes: &[CandidateBox], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| detection_order(boxes[i].seg_score, &boxes[i].rect, boxes[j].seg_score, &boxes[j].rect));
    let aabbs: Vec<AxisAlignedBox> = boxes.iter().map(|b| b.rect.aabb()).collect();
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept
            .iter()
            .any(|&k| aabbs[k].intersects(&aabbs[i]) && rotated_iou(&boxes[k].rect, &boxes[i].rect) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter()
        .map(|i| Detection {
            rect: boxes[i].rect,
            score: boxes[i].seg_score,
        })
        .collect()
}

/// Full inference from raw corner detections and segmentation maps.
pub fn detect(corners: &[CornerDetection], seg: &Tensor3D, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let sets = filter_corners(corners.iter().copied(), cfg);
    detect_from_sets(&sets, seg, cfg)
}

/// Inference from corner sets that were already thresholded and suppressed.
pub fn detect_from_sets(sets: &CornerSets, seg: &Tensor3D, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    if seg.channels() != cfg.g * cfg.g {
        return Err(Error::Config(format!(
            "segmentation has {} channels, g = {} needs {}",
            seg.channels(),
            cfg.g,
            cfg.g * cfg.g
        )));
    }
    let candidates = sample_and_group(sets, cfg);
    let scored = score_and_filter(&candidates, seg, cfg)?;
    Ok(rotated_nms(&scored, cfg.final_nms_iou))
}

/// Full inference from score and offset maps.
pub fn detect_from_maps(
    maps: &[LayerMaps],
    boxes: &DefaultBoxConfig,
    seg: &Tensor3D,
    cfg: &PipelineConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let sets = decode_corners(maps, boxes, cfg)?;
    detect_from_sets(&sets, seg, cfg)
}
