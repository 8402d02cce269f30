//! Training targets: corner ordering, corner squares, position-sensitive masks,
//! default boxes, default-box matching and offset encoding.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{polygon_area, AxisAlignedBox, Point, RotatedRect};
use crate::tensorio::Tensor3D;

/// The four corner kinds a detector predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CornerType {
    #[serde(rename = "TL")]
    TopLeft,
    #[serde(rename = "TR")]
    TopRight,
    #[serde(rename = "BR")]
    BottomRight,
    #[serde(rename = "BL")]
    BottomLeft,
}

impl CornerType {
    pub const ALL: [CornerType; 4] = [
        CornerType::TopLeft,
        CornerType::TopRight,
        CornerType::BottomRight,
        CornerType::BottomLeft,
    ];

    /// Position in TL, TR, BR, BL order; also the corner index in a [`RotatedRect`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn short_name(self) -> &'static str {
        match self {
            CornerType::TopLeft => "TL",
            CornerType::TopRight => "TR",
            CornerType::BottomRight => "BR",
            CornerType::BottomLeft => "BL",
        }
    }
}

impl fmt::Display for CornerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Reorders the corners of a rectangle into TL, TR, BR, BL.
///
/// The corners are first made clockwise. Of the four cyclic labelings, the one
/// whose left pair (TL, BL) lies furthest left of its right pair (TR, BR) wins,
/// which makes `x_TL < x_TR`, `x_BL < x_BR`, `y_TL < y_BL` and `y_TR < y_BR`
/// hold. When two labelings tie (e.g. a square at exactly 45 degrees) the one
/// with the smallest TL `(y, x)` is taken.
pub fn canonical_corner_order(quad: [Point; 4]) -> RotatedRect {
    let mut c = quad;
    if polygon_area(&c) < 0.0 {
        c.reverse();
    }
    let diag = (0..4)
        .flat_map(|i| (0..4).map(move |j| (i, j)))
        .map(|(i, j)| c[i].sub(c[j]).norm())
        .fold(0.0, f64::max);
    let tie_eps = 1e-9 * diag.max(1.0);

    let labeling = |k: usize| [c[k], c[(k + 1) % 4], c[(k + 2) % 4], c[(k + 3) % 4]];
    // Gap between the right edge of the left pair and the left edge of the right pair.
    let separation = |l: &[Point; 4]| l[0].x.max(l[3].x) - l[1].x.min(l[2].x);

    let mut best = labeling(0);
    let mut best_sep = separation(&best);
    for k in 1..4 {
        let cand = labeling(k);
        let sep = separation(&cand);
        let better = if (sep - best_sep).abs() <= tie_eps {
            let (a, b) = (cand[0], best[0]);
            a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x)).is_lt()
        } else {
            sep < best_sep
        };
        if better {
            best = cand;
            best_sep = sep;
        }
    }
    RotatedRect::from_corners(best)
}

/// A corner re-encoded as an axis-aligned square whose side is the owning
/// box's short side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerSquare {
    pub corner_type: CornerType,
    pub center: Point,
    pub side: f64,
}

impl CornerSquare {
    pub fn aabb(&self) -> AxisAlignedBox {
        AxisAlignedBox::square(self.center, self.side)
    }
}

/// One square per corner of `r`, all sized by the short side of `r`.
pub fn corner_squares(r: &RotatedRect) -> Result<[CornerSquare; 4]> {
    let side = r.short_side();
    if !(side > 0.0) {
        return Err(Error::DegenerateGeometry(format!("box has short side {side}")));
    }
    Ok(CornerType::ALL.map(|t| CornerSquare {
        corner_type: t,
        center: r.corners[t.index()],
        side,
    }))
}

/// Position-sensitive segmentation masks: channel `k` marks pixels in bin `k`
/// of the `g x g` grid of some box.
#[derive(Debug, Clone, PartialEq)]
pub struct PsMaskSet {
    pub g: usize,
    pub masks: Tensor3D,
}

/// Rasterizes position-sensitive masks at image resolution. A pixel belongs to
/// a bin when its center does.
pub fn ps_masks(boxes: &[RotatedRect], g: usize, height: usize, width: usize) -> Result<PsMaskSet> {
    if g == 0 {
        return Err(Error::Config("grid order g must be at least 1".into()));
    }
    let mut masks = Tensor3D::zeros(g * g, height, width);
    for rect in boxes {
        if !rect.is_finite() {
            return Err(Error::InvalidBox("non-finite box corner".into()));
        }
        let Some((x0, x1, y0, y1)) = pixel_span(&rect.aabb(), height, width) else {
            continue;
        };
        for py in y0..y1 {
            for px in x0..x1 {
                let center = Point::new(px as f64 + 0.5, py as f64 + 0.5);
                if let Some(k) = rect.grid_cell(center, g) {
                    masks.set(k, py, px, 1.0);
                }
            }
        }
    }
    Ok(PsMaskSet { g, masks })
}

/// Half-open pixel index ranges `(x0, x1, y0, y1)` whose centers may fall in `b`,
/// clipped to the image. `None` when nothing remains.
pub(crate) fn pixel_span(b: &AxisAlignedBox, height: usize, width: usize) -> Option<(usize, usize, usize, usize)> {
    let lo = |v: f64| (v - 0.5).floor().max(0.0);
    let hi = |v: f64, n: usize| ((v - 0.5).ceil() + 1.0).clamp(0.0, n as f64);
    let x0 = lo(b.x_min) as usize;
    let y0 = lo(b.y_min) as usize;
    let x1 = hi(b.x_max, width) as usize;
    let y1 = hi(b.y_max, height) as usize;
    (x0 < x1 && y0 < y1).then_some((x0, x1, y0, y1))
}

/// One feature layer carrying default boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub stride: u32,
    pub scales: Vec<f64>,
}

/// Default-box layout: input size plus per-layer strides and square scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefaultBoxConfig {
    pub input_width: u32,
    pub input_height: u32,
    pub layers: Vec<LayerSpec>,
    /// Axis-aligned IoU at which a default box matches a corner square.
    pub match_threshold: f64,
}

impl Default for DefaultBoxConfig {
    fn default() -> Self {
        let layer = |name: &str, stride: u32, scales: &[f64]| LayerSpec {
            name: name.to_string(),
            stride,
            scales: scales.to_vec(),
        };
        Self {
            input_width: 512,
            input_height: 512,
            layers: vec![
                // F3 scales kept in their published order.
                layer("F3", 4, &[4.0, 8.0, 6.0, 10.0, 12.0, 16.0]),
                layer("F4", 8, &[20.0, 24.0, 28.0, 32.0]),
                layer("F7", 16, &[36.0, 40.0, 44.0, 48.0]),
                layer("F8", 32, &[56.0, 64.0, 72.0, 80.0]),
                layer("F9", 64, &[88.0, 96.0, 104.0, 112.0]),
                layer("F10", 128, &[124.0, 136.0, 148.0, 160.0]),
                layer("F11", 256, &[184.0, 208.0, 232.0, 256.0]),
            ],
            match_threshold: 0.5,
        }
    }
}

impl DefaultBoxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.input_height == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        if !(self.match_threshold > 0.0 && self.match_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "match_threshold {} outside (0, 1]",
                self.match_threshold
            )));
        }
        for l in &self.layers {
            if l.stride == 0
                || !self.input_width.is_multiple_of(l.stride)
                || !self.input_height.is_multiple_of(l.stride)
            {
                return Err(Error::Config(format!(
                    "input size {}x{} is not divisible by stride {} of layer {}",
                    self.input_width, self.input_height, l.stride, l.name
                )));
            }
            if l.scales.is_empty() || l.scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::Config(format!("layer {} needs positive scales", l.name)));
            }
        }
        Ok(())
    }

    /// Feature-map size `(rows, cols)` of layer `i`.
    pub fn grid_size(&self, i: usize) -> (usize, usize) {
        let s = self.layers[i].stride;
        ((self.input_height / s) as usize, (self.input_width / s) as usize)
    }

    /// Closed-form number of default boxes.
    pub fn box_count(&self) -> usize {
        (0..self.layers.len())
            .map(|i| {
                let (r, c) = self.grid_size(i);
                r * c * self.layers[i].scales.len()
            })
            .sum()
    }

    /// Restricts the configuration to the named layers.
    pub fn with_layers(mut self, names: &[&str]) -> Self {
        self.layers.retain(|l| names.contains(&l.name.as_str()));
        self
    }
}

/// A square anchor at one feature-grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefaultBox {
    pub layer_index: usize,
    pub row: usize,
    pub col: usize,
    pub scale_index: usize,
    pub center: Point,
    pub side: f64,
}

impl DefaultBox {
    pub fn aabb(&self) -> AxisAlignedBox {
        AxisAlignedBox::square(self.center, self.side)
    }
}

/// All default boxes, ordered by layer, row, column, then scale.
pub fn generate_default_boxes(cfg: &DefaultBoxConfig) -> Result<Vec<DefaultBox>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.box_count());
    for (li, layer) in cfg.layers.iter().enumerate() {
        let (rows, cols) = cfg.grid_size(li);
        let stride = layer.stride as f64;
        for row in 0..rows {
            for col in 0..cols {
                let center = Point::new((col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride);
                for (si, &side) in layer.scales.iter().enumerate() {
                    out.push(DefaultBox {
                        layer_index: li,
                        row,
                        col,
                        scale_index: si,
                        center,
                        side,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// A positive `(default box, corner type)` assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerMatch {
    pub box_index: usize,
    pub square_index: usize,
    pub corner_type: CornerType,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Sorted by `(box_index, corner_type)`; at most one per pair.
    pub matches: Vec<CornerMatch>,
    /// `positive[b][t]` is set when box `b` matched a square of type `t`.
    pub positive: Vec<[bool; 4]>,
}

impl MatchResult {
    /// `(box_index, corner_type)` pairs left as negatives.
    pub fn negatives(&self) -> impl Iterator<Item = (usize, CornerType)> + '_ {
        self.positive.iter().enumerate().flat_map(|(b, flags)| {
            CornerType::ALL
                .into_iter()
                .filter(move |t| !flags[t.index()])
                .map(move |t| (b, t))
        })
    }

    pub fn num_positive(&self) -> usize {
        self.matches.len()
    }
}

/// Matches default boxes to corner squares.
///
/// A `(box, type)` pair is positive when the box overlaps a square of that type
/// with axis-aligned IoU at or above `threshold`; the highest-IoU square wins.
/// Afterwards every square claims its best-IoU box (ties to the lowest index)
/// among pairs not already claimed by an earlier square, even below threshold.
pub fn match_corners(default_boxes: &[DefaultBox], squares: &[CornerSquare], threshold: f64) -> MatchResult {
    let n = default_boxes.len();
    let mut best: Vec<[Option<(usize, f64)>; 4]> = vec![[None; 4]; n];
    let mut forced: Vec<[bool; 4]> = vec![[false; 4]; n];

    let square_boxes: Vec<AxisAlignedBox> = squares.iter().map(|s| s.aabb()).collect();

    for (bi, db) in default_boxes.iter().enumerate() {
        let dbb = db.aabb();
        for (si, (sq, sb)) in squares.iter().zip(&square_boxes).enumerate() {
            if !dbb.intersects(sb) {
                continue;
            }
            let iou = dbb.iou(sb);
            if iou < threshold {
                continue;
            }
            let slot = &mut best[bi][sq.corner_type.index()];
            if slot.is_none_or(|(_, cur)| iou > cur) {
                *slot = Some((si, iou));
            }
        }
    }

    for (si, (sq, sb)) in squares.iter().zip(&square_boxes).enumerate() {
        let t = sq.corner_type.index();
        let mut arg: Option<(usize, f64)> = None;
        for (bi, db) in default_boxes.iter().enumerate() {
            if forced[bi][t] {
                continue;
            }
            let iou = db.aabb().iou(sb);
            if iou > 0.0 && arg.is_none_or(|(_, cur)| iou > cur) {
                arg = Some((bi, iou));
            }
        }
        if let Some((bi, iou)) = arg {
            forced[bi][t] = true;
            best[bi][t] = Some((si, iou));
        }
    }

    let mut matches = Vec::new();
    let mut positive = vec![[false; 4]; n];
    for (bi, slots) in best.iter().enumerate() {
        for t in CornerType::ALL {
            if let Some((si, iou)) = slots[t.index()] {
                positive[bi][t.index()] = true;
                matches.push(CornerMatch {
                    box_index: bi,
                    square_index: si,
                    corner_type: t,
                    iou,
                });
            }
        }
    }
    MatchResult { matches, positive }
}

/// Regression target of a corner square relative to a default box:
/// `(dx, dy, dss, dss)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetTarget {
    pub dx: f64,
    pub dy: f64,
    pub dss: [f64; 2],
}

impl OffsetTarget {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dss[0], self.dss[1]]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            dx: a[0],
            dy: a[1],
            dss: [a[2], a[3]],
        }
    }
}

/// `dx = (x_b - x_c) / ss_b`, `dy = (y_b - y_c) / ss_b`, `dss = ln(ss_b / ss_c)`.
pub fn encode_offsets(b: &DefaultBox, c: &CornerSquare) -> Result<OffsetTarget> {
    if !(b.side > 0.0) || !(c.side > 0.0) {
        return Err(Error::InvalidBox(format!(
            "offset encoding needs positive sides, got default {} and corner {}",
            b.side, c.side
        )));
    }
    let dss = (b.side / c.side).ln();
    Ok(OffsetTarget {
        dx: (b.center.x - c.center.x) / b.side,
        dy: (b.center.y - c.center.y) / b.side,
        dss: [dss, dss],
    })
}

/// Inverse of [`encode_offsets`]. The two `dss` entries are averaged.
pub fn decode_offsets(b: &DefaultBox, o: &OffsetTarget, corner_type: CornerType) -> CornerSquare {
    let dss = 0.5 * (o.dss[0] + o.dss[1]);
    CornerSquare {
        corner_type,
        center: Point::new(b.center.x - o.dx * b.side, b.center.y - o.dy * b.side),
        side: b.side / dss.exp(),
    }
}

/// Score and offset maps of one feature layer.
///
/// `scores` has `k * 4 * 2` channels: for scale `s` and corner type `t` the
/// background / corner pair sits at channels `(s * 4 + t) * 2 + {0, 1}`.
/// `offsets` has `k * 4 * 4` channels holding `(dx, dy, dss, dss)` at
/// `(s * 4 + t) * 4 + {0, 1, 2, 3}`. Both are `rows x cols` of the layer grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMaps {
    pub scores: Tensor3D,
    pub offsets: Tensor3D,
}

#[inline]
pub fn score_channel(scale_index: usize, t: CornerType, class: usize) -> usize {
    (scale_index * 4 + t.index()) * 2 + class
}

#[inline]
pub fn offset_channel(scale_index: usize, t: CornerType, k: usize) -> usize {
    (scale_index * 4 + t.index()) * 4 + k
}

/// Training targets for the corner branch in map form.
#[derive(Debug, Clone)]
pub struct CornerTargets {
    pub default_boxes: Vec<DefaultBox>,
    pub squares: Vec<CornerSquare>,
    pub matching: MatchResult,
    /// One-hot labels in the score slots and encoded offsets of positives.
    pub maps: Vec<LayerMaps>,
}

/// Orders every ground-truth box, builds its corner squares, matches them to
/// the default boxes and lays the result out as per-layer maps.
pub fn corner_targets(boxes: &[RotatedRect], cfg: &DefaultBoxConfig) -> Result<CornerTargets> {
    let default_boxes = generate_default_boxes(cfg)?;
    let mut squares = Vec::with_capacity(boxes.len() * 4);
    for r in boxes {
        let ordered = crate::geometry::min_area_rect(&r.corners)?;
        squares.extend(corner_squares(&ordered)?);
    }
    let matching = match_corners(&default_boxes, &squares, cfg.match_threshold);

    let mut maps: Vec<LayerMaps> = (0..cfg.layers.len())
        .map(|li| {
            let (rows, cols) = cfg.grid_size(li);
            let k = cfg.layers[li].scales.len();
            let mut scores = Tensor3D::zeros(k * 8, rows, cols);
            for s in 0..k {
                for t in CornerType::ALL {
                    let c = score_channel(s, t, 0);
                    let n = rows * cols;
                    scores.data_mut()[c * n..(c + 1) * n].fill(1.0);
                }
            }
            LayerMaps {
                scores,
                offsets: Tensor3D::zeros(k * 16, rows, cols),
            }
        })
        .collect();

    for m in &matching.matches {
        let db = &default_boxes[m.box_index];
        let sq = &squares[m.square_index];
        let off = encode_offsets(db, sq)?.to_array();
        let lm = &mut maps[db.layer_index];
        lm.scores
            .set(score_channel(db.scale_index, m.corner_type, 0), db.row, db.col, 0.0);
        lm.scores
            .set(score_channel(db.scale_index, m.corner_type, 1), db.row, db.col, 1.0);
        for (k, v) in off.into_iter().enumerate() {
            lm.offsets.set(
                offset_channel(db.scale_index, m.corner_type, k),
                db.row,
                db.col,
                v as f32,
            );
        }
    }
    Ok(CornerTargets {
        default_boxes,
        squares,
        matching,
        maps,
    })
}
