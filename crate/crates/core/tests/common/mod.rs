//! Independent reference implementations used by the integration tests.
//! None of these call into the code they check, except where noted.

#![allow(dead_code)]

use cornerseg::geometry::{rotated_iou, Point, RotatedRect};
use cornerseg::pipeline::{CandidateBox, Detection};
use cornerseg::Tensor3D;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rect(rng: &mut ChaCha8Rng, center_range: (f64, f64), side_range: (f64, f64)) -> RotatedRect {
    let x = rng.random_range(center_range.0..center_range.1);
    let y = rng.random_range(center_range.0..center_range.1);
    let w = rng.random_range(side_range.0..side_range.1);
    let h = rng.random_range(side_range.0..side_range.1);
    let th = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    RotatedRect::from_center_form(x, y, w, h, th).unwrap()
}

/// Point-in-convex-quad by edge cross-product signs, either winding.
pub fn inside_quad(q: &[Point; 4], x: f64, y: f64) -> bool {
    let mut pos = false;
    let mut neg = false;
    for i in 0..4 {
        let a = q[i];
        let b = q[(i + 1) % 4];
        let c = (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
        if c > 0.0 {
            pos = true;
        }
        if c < 0.0 {
            neg = true;
        }
    }
    !(pos && neg)
}

/// Monte-Carlo IoU: one jittered sample per cell of an `n x n` grid over the
/// union bounding box.
pub fn monte_carlo_iou(a: &RotatedRect, b: &RotatedRect, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let xs = a.corners.iter().chain(&b.corners).map(|p| p.x);
    let ys = a.corners.iter().chain(&b.corners).map(|p| p.y);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (dx, dy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
    let (mut ia, mut ib, mut both) = (0u64, 0u64, 0u64);
    for i in 0..n {
        for j in 0..n {
            let x = x0 + (i as f64 + rng.random::<f64>()) * dx;
            let y = y0 + (j as f64 + rng.random::<f64>()) * dy;
            let in_a = inside_quad(&a.corners, x, y);
            let in_b = inside_quad(&b.corners, x, y);
            ia += in_a as u64;
            ib += in_b as u64;
            both += (in_a && in_b) as u64;
        }
    }
    let union = ia + ib - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

fn lerp(a: Point, b: Point, t: f64) -> Point {
    Point::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t)
}

/// Bin `(row, col)` membership computed from the bin's own corners: the point
/// is projected onto the bin's edge vectors. Interior grid lines belong to the
/// later bin; the outer boundary is closed.
fn in_bin(r: &RotatedRect, g: usize, row: usize, col: usize, p: Point) -> bool {
    let gf = g as f64;
    let at = |s: f64, t: f64| {
        lerp(
            lerp(r.corners[0], r.corners[1], s),
            lerp(r.corners[3], r.corners[2], s),
            t,
        )
    };
    let o = at(col as f64 / gf, row as f64 / gf);
    let u_end = at((col + 1) as f64 / gf, row as f64 / gf);
    let v_end = at(col as f64 / gf, (row + 1) as f64 / gf);
    let u = Point::new(u_end.x - o.x, u_end.y - o.y);
    let v = Point::new(v_end.x - o.x, v_end.y - o.y);
    let d = Point::new(p.x - o.x, p.y - o.y);
    let s = (d.x * u.x + d.y * u.y) / (u.x * u.x + u.y * u.y);
    let t = (d.x * v.x + d.y * v.y) / (v.x * v.x + v.y * v.y);
    let eps = 1e-9;
    let s_ok = s >= -eps
        && if col + 1 == g {
            s <= 1.0 + eps
        } else {
            s < 1.0 - eps * gf
        };
    let t_ok = t >= -eps
        && if row + 1 == g {
            t <= 1.0 + eps
        } else {
            t < 1.0 - eps * gf
        };
    s_ok && t_ok
}

/// Rotated position-sensitive ROI average pooling written as the plain
/// per-bin loop over every pixel of the image.
pub fn literal_rps_pool(r: &RotatedRect, seg: &Tensor3D, g: usize) -> f64 {
    let mut score = 0.0;
    for row in 0..g {
        for col in 0..g {
            let k = row * g + col;
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for py in 0..seg.height() {
                for px in 0..seg.width() {
                    let p = Point::new(px as f64 + 0.5, py as f64 + 0.5);
                    if in_bin(r, g, row, col, p) {
                        sum += seg.get(k, py, px) as f64;
                        count += 1;
                    }
                }
            }
            if count > 0 {
                score += sum / count as f64;
            }
        }
    }
    score / (g * g) as f64
}

/// Quadratic greedy NMS without any spatial shortcut. Uses the crate's rotated IoU.
pub fn reference_nms(boxes: &[CandidateBox], thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        boxes[j].seg_score.total_cmp(&boxes[i].seg_score).then_with(|| {
            let key = |r: &RotatedRect| r.corners.iter().flat_map(|p| [p.x, p.y]).collect::<Vec<_>>();
            key(&boxes[i].rect)
                .iter()
                .zip(key(&boxes[j].rect))
                .map(|(a, b)| a.total_cmp(&b))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut alive = vec![true; boxes.len()];
    let mut out = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        out.push(Detection {
            rect: boxes[i].rect,
            score: boxes[i].seg_score,
        });
        for &j in &order[pos + 1..] {
            if alive[j] && rotated_iou(&boxes[i].rect, &boxes[j].rect) > thr {
                alive[j] = false;
            }
        }
    }
    out
}

/// Hard negative selection by full sort: all positives, then the
/// highest-loss negatives (lower index first on ties), `ratio` per positive or
/// `floor` when there are no positives.
pub fn reference_ohem(losses: &[f64], labels: &[bool], ratio: usize, floor: usize) -> Vec<usize> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    neg.sort_by(|&a, &b| losses[b].partial_cmp(&losses[a]).unwrap().then(a.cmp(&b)));
    let want = if pos.is_empty() { floor } else { ratio * pos.len() };
    let mut sel: Vec<usize> = pos.into_iter().chain(neg.into_iter().take(want)).collect();
    sel.sort();
    sel
}

/// Central finite-difference gradient.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let fp = f(&x);
            x[i] = orig - h;
            let fm = f(&x);
            x[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
