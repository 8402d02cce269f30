//! Rotated-rectangle primitives.
//!
//! Coordinates are image pixels with the y axis pointing down, so a rectangle
//! whose corners run top-left, top-right, bottom-right, bottom-left is clockwise
//! on screen and has a positive shoelace sum.

use std::cmp::Ordering;
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used by containment and grid-cell tests.
const REL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    #[inline]
    pub fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    #[inline]
    pub fn scale(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }

    #[inline]
    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 2D cross product.
    #[inline]
    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Rotates the point by `angle` radians about `origin`.
    pub fn rotate_about(self, origin: Point, angle: f64) -> Point {
        let (s, c) = angle.sin_cos();
        let d = self.sub(origin);
        Point::new(origin.x + c * d.x - s * d.y, origin.y + s * d.x + c * d.y)
    }

    /// Lexicographic (x, then y) total order.
    pub fn lex_cmp(&self, o: &Point) -> Ordering {
        self.x.total_cmp(&o.x).then(self.y.total_cmp(&o.y))
    }
}

/// An axis-aligned box, inclusive of its boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisAlignedBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl AxisAlignedBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        debug_assert!(x_min <= x_max && y_min <= y_max);
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Square of side `side` centered on `center`.
    pub fn square(center: Point, side: f64) -> Self {
        let h = side / 2.0;
        Self::new(center.x - h, center.y - h, center.x + h, center.y + h)
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Point>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = Self::new(first.x, first.y, first.x, first.y);
        for p in it {
            b.x_min = b.x_min.min(p.x);
            b.y_min = b.y_min.min(p.y);
            b.x_max = b.x_max.max(p.x);
            b.y_max = b.y_max.max(p.y);
        }
        Some(b)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersects(&self, o: &AxisAlignedBox) -> bool {
        self.x_min <= o.x_max && o.x_min <= self.x_max && self.y_min <= o.y_max && o.y_min <= self.y_max
    }

    pub fn iou(&self, o: &AxisAlignedBox) -> f64 {
        let iw = (self.x_max.min(o.x_max) - self.x_min.max(o.x_min)).max(0.0);
        let ih = (self.y_max.min(o.y_max) - self.y_min.max(o.y_min)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// A rotated rectangle stored as its four corners in top-left, top-right,
/// bottom-right, bottom-left order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedRect {
    pub corners: [Point; 4],
}

/// Center form `(x, y, w, h, theta)`; `w` runs along the top-left to top-right edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterForm {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl RotatedRect {
    pub const TL: usize = 0;
    pub const TR: usize = 1;
    pub const BR: usize = 2;
    pub const BL: usize = 3;

    /// Wraps four corners already in TL, TR, BR, BL order.
    pub fn from_corners(corners: [Point; 4]) -> Self {
        Self { corners }
    }

    /// Builds the rectangle centered at `(x, y)` with width `w` along direction
    /// `theta` (radians, normalized to `(-pi/2, pi/2]`) and height `h`.
    pub fn from_center_form(x: f64, y: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
            return Err(Error::InvalidBox(format!("sides must be positive, got w={w}, h={h}")));
        }
        if !(x.is_finite() && y.is_finite() && theta.is_finite()) {
            return Err(Error::InvalidBox("non-finite center or angle".into()));
        }
        let theta = normalize_angle(theta);
        let (s, c) = theta.sin_cos();
        let u = Point::new(c * w / 2.0, s * w / 2.0);
        let v = Point::new(-s * h / 2.0, c * h / 2.0);
        let ctr = Point::new(x, y);
        Ok(Self {
            corners: [
                ctr.sub(u).sub(v),
                ctr.add(u).sub(v),
                ctr.add(u).add(v),
                ctr.sub(u).add(v),
            ],
        })
    }

    pub fn to_center_form(&self) -> CenterForm {
        let c = self.center();
        let top = self.corners[Self::TR].sub(self.corners[Self::TL]);
        CenterForm {
            x: c.x,
            y: c.y,
            w: self.width(),
            h: self.height(),
            theta: top.y.atan2(top.x),
        }
    }

    pub fn tl(&self) -> Point {
        self.corners[Self::TL]
    }
    pub fn tr(&self) -> Point {
        self.corners[Self::TR]
    }
    pub fn br(&self) -> Point {
        self.corners[Self::BR]
    }
    pub fn bl(&self) -> Point {
        self.corners[Self::BL]
    }

    pub fn center(&self) -> Point {
        let s = self.corners.iter().fold(Point::new(0.0, 0.0), |a, &p| a.add(p));
        s.scale(0.25)
    }

    /// Length of the TL-TR edge.
    pub fn width(&self) -> f64 {
        self.tr().sub(self.tl()).norm()
    }

    /// Length of the TL-BL edge.
    pub fn height(&self) -> f64 {
        self.bl().sub(self.tl()).norm()
    }

    pub fn short_side(&self) -> f64 {
        self.width().min(self.height())
    }

    pub fn diagonal(&self) -> f64 {
        self.br().sub(self.tl()).norm()
    }

    /// Unsigned area.
    pub fn area(&self) -> f64 {
        polygon_area(&self.corners).abs()
    }

    pub fn is_clockwise(&self) -> bool {
        polygon_area(&self.corners) > 0.0
    }

    pub fn aabb(&self) -> AxisAlignedBox {
        AxisAlignedBox::from_points(&self.corners).expect("four corners")
    }

    pub fn is_finite(&self) -> bool {
        self.corners.iter().all(|p| p.is_finite())
    }

    /// Checks the rectangle invariant: equal opposite sides and right angles.
    pub fn is_rectangle(&self, tol: f64) -> bool {
        let [a, b, c, d] = self.corners;
        let diag = self.diagonal().max(1e-300);
        let top = b.sub(a);
        let right = c.sub(b);
        let bottom = c.sub(d);
        let left = d.sub(a);
        let sides_ok =
            (top.norm() - bottom.norm()).abs() <= tol * diag && (left.norm() - right.norm()).abs() <= tol * diag;
        let (tn, ln) = (top.norm(), left.norm());
        let angle_ok = tn == 0.0 || ln == 0.0 || (top.dot(left) / (tn * ln)).abs() <= tol;
        sides_ok && angle_ok
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        let d = Point::new(dx, dy);
        Self {
            corners: self.corners.map(|p| p.add(d)),
        }
    }

    pub fn rotate_about(&self, origin: Point, angle: f64) -> Self {
        Self {
            corners: self.corners.map(|p| p.rotate_about(origin, angle)),
        }
    }

    /// Point at parametric position `(s, t)`: `s` runs TL to TR, `t` runs TL to BL.
    pub fn point_at(&self, s: f64, t: f64) -> Point {
        let u = self.tr().sub(self.tl());
        let v = self.bl().sub(self.tl());
        self.tl().add(u.scale(s)).add(v.scale(t))
    }

    /// Parametric coordinates of `p` in the rectangle frame (inverse of [`Self::point_at`]).
    pub fn local_coords(&self, p: Point) -> (f64, f64) {
        let u = self.tr().sub(self.tl());
        let v = self.bl().sub(self.tl());
        let d = p.sub(self.tl());
        let uu = u.dot(u);
        let vv = v.dot(v);
        let s = if uu > 0.0 { d.dot(u) / uu } else { f64::NAN };
        let t = if vv > 0.0 { d.dot(v) / vv } else { f64::NAN };
        (s, t)
    }

    /// The `g x g` regular grid of sub-rectangles, row-major from the TL bin.
    pub fn bins(&self, g: usize) -> Vec<RotatedRect> {
        let gf = g as f64;
        let mut out = Vec::with_capacity(g * g);
        for row in 0..g {
            for col in 0..g {
                let (s0, s1) = (col as f64 / gf, (col + 1) as f64 / gf);
                let (t0, t1) = (row as f64 / gf, (row + 1) as f64 / gf);
                out.push(RotatedRect::from_corners([
                    self.point_at(s0, t0),
                    self.point_at(s1, t0),
                    self.point_at(s1, t1),
                    self.point_at(s0, t1),
                ]));
            }
        }
        out
    }

    /// Index of the `g x g` bin containing `p`, or `None` when `p` lies outside.
    ///
    /// The rectangle is closed; interior bin boundaries belong to the bin with
    /// the larger index along each axis, so the bins partition the rectangle.
    pub fn grid_cell(&self, p: Point, g: usize) -> Option<usize> {
        let (s, t) = self.local_coords(p);
        let col = grid_index(s, g)?;
        let row = grid_index(t, g)?;
        Some(row * g + col)
    }
}

/// Maps a parametric coordinate to its grid index, snapping values within
/// `REL_EPS` of a grid line onto it.
fn grid_index(s: f64, g: usize) -> Option<usize> {
    if !(-REL_EPS..=1.0 + REL_EPS).contains(&s) {
        return None;
    }
    let gs = s * g as f64;
    let snapped = if (gs - gs.round()).abs() <= REL_EPS * g as f64 {
        gs.round()
    } else {
        gs
    };
    let idx = snapped.floor().max(0.0) as usize;
    Some(idx.min(g - 1))
}

/// Maps an angle onto `(-pi/2, pi/2]` modulo pi.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut t = theta % std::f64::consts::PI;
    if t > FRAC_PI_2 {
        t -= std::f64::consts::PI;
    } else if t <= -FRAC_PI_2 {
        t += std::f64::consts::PI;
    }
    t
}

/// Signed shoelace area; positive for clockwise order in y-down coordinates.
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a.cross(b);
    }
    acc / 2.0
}

/// True when `p` lies inside `rect` or on its boundary.
pub fn contains(rect: &RotatedRect, p: Point) -> bool {
    let orient = if polygon_area(&rect.corners) >= 0.0 { 1.0 } else { -1.0 };
    let scale = rect.diagonal().max(1.0);
    (0..4).all(|i| {
        let a = rect.corners[i];
        let b = rect.corners[(i + 1) % 4];
        let edge = b.sub(a);
        orient * edge.cross(p.sub(a)) >= -REL_EPS * scale * edge.norm()
    })
}

/// Clips the convex polygon `subject` against the convex polygon `clip`.
///
/// Both polygons must share the same orientation (clockwise in y-down here).
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let edge = b.sub(a);
        let side = |p: Point| edge.cross(p.sub(a));
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    p.add(q.sub(p).scale(t))
}

fn oriented_corners(r: &RotatedRect) -> [Point; 4] {
    let mut c = r.corners;
    if polygon_area(&c) < 0.0 {
        c.reverse();
    }
    c
}

/// Area of the intersection of two rotated rectangles.
pub fn intersection_area(a: &RotatedRect, b: &RotatedRect) -> f64 {
    if !a.aabb().intersects(&b.aabb()) {
        return 0.0;
    }
    let pa = oriented_corners(a);
    let pb = oriented_corners(b);
    polygon_area(&clip_convex(&pa, &pb)).abs()
}

/// Polygon intersection-over-union of two rotated rectangles.
pub fn rotated_iou(a: &RotatedRect, b: &RotatedRect) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Convex hull by the monotone chain, clockwise in y-down coordinates.
/// Collinear points are dropped.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.lex_cmp(b));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let turn = |o: Point, a: Point, b: Point| a.sub(o).cross(b.sub(o));
    let mut lower: Vec<Point> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && turn(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && turn(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Minimum-area enclosing rectangle by rotating calipers over the hull edges,
/// returned in canonical corner order.
pub fn min_area_rect(points: &[Point]) -> Result<RotatedRect> {
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::DegenerateGeometry("non-finite point".into()));
    }
    let hull = convex_hull(points);
    let hull_area = polygon_area(&hull).abs();
    let extent = AxisAlignedBox::from_points(&hull)
        .map(|b| b.width().max(b.height()))
        .unwrap_or(0.0);
    if hull.len() < 3 || hull_area <= REL_EPS * extent * extent {
        return Err(Error::DegenerateGeometry(format!(
            "need at least 3 non-collinear points, got {} hull vertices",
            hull.len()
        )));
    }

    let n = hull.len();
    let mut best: Option<(f64, [Point; 4])> = None;
    for i in 0..n {
        let a = hull[i];
        let b = hull[(i + 1) % n];
        let len = b.sub(a).norm();
        if len == 0.0 {
            continue;
        }
        let u = b.sub(a).scale(1.0 / len);
        let v = Point::new(-u.y, u.x);
        let (mut s_min, mut s_max, mut t_min, mut t_max) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &hull {
            let d = p.sub(a);
            let s = d.dot(u);
            let t = d.dot(v);
            s_min = s_min.min(s);
            s_max = s_max.max(s);
            t_min = t_min.min(t);
            t_max = t_max.max(t);
        }
        let area = (s_max - s_min) * (t_max - t_min);
        if best.as_ref().is_none_or(|(best_area, _)| area < *best_area) {
            let at = |s: f64, t: f64| a.add(u.scale(s)).add(v.scale(t));
            best = Some((
                area,
                [at(s_min, t_min), at(s_max, t_min), at(s_max, t_max), at(s_min, t_max)],
            ));
        }
    }
    let (_, quad) = best.expect("hull has edges");
    Ok(crate::targets::canonical_corner_order(quad))
}
