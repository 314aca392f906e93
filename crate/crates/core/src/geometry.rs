//! Box and polygon primitives shared by the model, the losses and the evaluator.
//!
//! Every coordinate is normalized to the image: `(0, 0)` is the top-left corner
//! and `(1, 1)` the bottom-right one. Nothing in this module clamps; callers
//! that need values inside the unit square clamp explicitly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of points in a text polygon.
pub const POLYGON_POINTS: usize = 16;

pub type Point = [f64; 2];

/// Axis-aligned box in center form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Axis-aligned box in corner form, `x0 <= x1` and `y0 <= y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl CenterBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_corners(&self) -> CornerBox {
        box_convert(*self)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Axis-aligned hull of a point set.
    pub fn enclosing(points: &[Point]) -> Self {
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        CornerBox { x0, y0, x1, y1 }.to_center()
    }

    pub fn contains(&self, p: Point) -> bool {
        let c = self.to_corners();
        p[0] >= c.x0 && p[0] <= c.x1 && p[1] >= c.y0 && p[1] <= c.y1
    }

    pub fn clamped(&self) -> Self {
        let c = self.to_corners();
        CornerBox {
            x0: c.x0.clamp(0.0, 1.0),
            y0: c.y0.clamp(0.0, 1.0),
            x1: c.x1.clamp(0.0, 1.0),
            y1: c.y1.clamp(0.0, 1.0),
        }
        .to_center()
    }
}

impl CornerBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn to_center(&self) -> CenterBox {
        CenterBox {
            cx: 0.5 * (self.x0 + self.x1),
            cy: 0.5 * (self.y0 + self.y1),
            w: self.x1 - self.x0,
            h: self.y1 - self.y0,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    fn intersection_area(&self, other: &CornerBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    fn enclosing_area(&self, other: &CornerBox) -> f64 {
        let w = self.x1.max(other.x1) - self.x0.min(other.x0);
        let h = self.y1.max(other.y1) - self.y0.min(other.y0);
        w.max(0.0) * h.max(0.0)
    }
}

pub fn box_convert(b: CenterBox) -> CornerBox {
    CornerBox {
        x0: b.cx - 0.5 * b.w,
        y0: b.cy - 0.5 * b.h,
        x1: b.cx + 0.5 * b.w,
        y1: b.cy + 0.5 * b.h,
    }
}

pub fn iou(a: &CornerBox, b: &CornerBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU together with a flag raised when the value was defined by
/// convention rather than computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Giou {
    pub value: f64,
    /// Both boxes had zero area; `value` is 0 by convention.
    pub degenerate: bool,
}

pub fn giou_flagged(a: &CornerBox, b: &CornerBox) -> Giou {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Giou {
            value: 0.0,
            degenerate: true,
        };
    }
    let enclosing = a.enclosing_area(b);
    let iou = inter / union;
    let value = if enclosing > 0.0 {
        iou - (enclosing - union) / enclosing
    } else {
        iou
    };
    Giou {
        value,
        degenerate: false,
    }
}

pub fn giou(a: &CornerBox, b: &CornerBox) -> f64 {
    giou_flagged(a, b).value
}

/// A text boundary with exactly [`POLYGON_POINTS`] points: eight along the top
/// edge left to right, then eight along the bottom edge right to left.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon16 {
    points: [Point; POLYGON_POINTS],
}

impl Polygon16 {
    pub fn from_points(points: &[Point]) -> Result<Self> {
        if points.len() != POLYGON_POINTS {
            return Err(Error::PointCount {
                expected: POLYGON_POINTS,
                got: points.len(),
            });
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("polygon coordinate"));
        }
        let mut arr = [[0.0; 2]; POLYGON_POINTS];
        arr.copy_from_slice(points);
        Ok(Self { points: arr })
    }

    /// Builds from `[x0, y0, x1, y1, ...]`.
    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if coords.len() != 2 * POLYGON_POINTS {
            return Err(Error::PointCount {
                expected: POLYGON_POINTS,
                got: coords.len() / 2,
            });
        }
        let points: Vec<Point> = coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        Self::from_points(&points)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn points(&self) -> &[Point; POLYGON_POINTS] {
        &self.points
    }

    pub fn bounding_box(&self) -> CenterBox {
        CenterBox::enclosing(&self.points)
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.points)
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Self {
        let mut points = self.points;
        for p in points.iter_mut() {
            *p = f(*p);
        }
        Self { points }
    }
}

/// Places each offset relative to the proposal center.
pub fn reconstruct_polygon(proposal: &CenterBox, offsets: &[Point]) -> Result<Polygon16> {
    if offsets.len() != POLYGON_POINTS {
        return Err(Error::PointCount {
            expected: POLYGON_POINTS,
            got: offsets.len(),
        });
    }
    let points: Vec<Point> = offsets
        .iter()
        .map(|d| [proposal.cx + d[0], proposal.cy + d[1]])
        .collect();
    Polygon16::from_points(&points)
}

/// Inverse of [`reconstruct_polygon`] for a fixed proposal.
pub fn extract_offsets(proposal: &CenterBox, polygon: &Polygon16) -> [Point; POLYGON_POINTS] {
    let mut out = [[0.0; 2]; POLYGON_POINTS];
    for (o, p) in out.iter_mut().zip(polygon.points()) {
        *o = [p[0] - proposal.cx, p[1] - proposal.cy];
    }
    out
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area, positive for counter-clockwise rings in a y-up frame.
pub fn signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * acc
}

pub fn polygon_area(ring: &[Point]) -> f64 {
    match prepare_ring(ring) {
        Some(r) => signed_area(&r).abs(),
        None => 0.0,
    }
}

fn segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |a: Point, b: Point, p: Point, d: f64| {
        d == 0.0
            && p[0] >= a[0].min(b[0])
            && p[0] <= a[0].max(b[0])
            && p[1] >= a[1].min(b[1])
            && p[1] <= a[1].max(b[1])
    };
    on(q1, q2, p1, d1) || on(q1, q2, p2, d2) || on(p1, p2, q1, d3) || on(p1, p2, q2, d4)
}

/// True when two non-adjacent edges of the closed ring touch or cross.
pub fn is_self_intersecting(ring: &[Point]) -> bool {
    let n = ring.len();
    if n < 4 {
        return false;
    }
    for i in 0..n {
        let (a1, a2) = (ring[i], ring[(i + 1) % n]);
        for j in (i + 1)..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (b1, b2) = (ring[j], ring[(j + 1) % n]);
            if segments_intersect(a1, a2, b1, b2) {
                return true;
            }
        }
    }
    false
}

/// Counter-clockwise hull via the monotone chain.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Drops repeated and collinear vertices, repairs self-intersecting rings by
/// their convex hull and orients the result counter-clockwise. `None` means
/// the ring encloses no area.
fn prepare_ring(ring: &[Point]) -> Option<Vec<Point>> {
    if ring.iter().flatten().any(|v| !v.is_finite()) {
        return None;
    }
    let mut pts: Vec<Point> = Vec::with_capacity(ring.len());
    for &p in ring {
        if pts.last().is_none_or(|q: &Point| q != &p) {
            pts.push(p);
        }
    }
    while pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    let mut changed = true;
    while changed && pts.len() >= 3 {
        changed = false;
        let n = pts.len();
        for i in 0..n {
            let prev = pts[(i + n - 1) % n];
            let next = pts[(i + 1) % n];
            if cross(prev, pts[i], next) == 0.0 {
                pts.remove(i);
                changed = true;
                break;
            }
        }
    }
    if pts.len() < 3 {
        return None;
    }
    if is_self_intersecting(&pts) {
        log::warn!("self-intersecting polygon replaced by its convex hull");
        pts = convex_hull(&pts);
        if pts.len() < 3 {
            return None;
        }
    }
    let area = signed_area(&pts);
    if area == 0.0 {
        return None;
    }
    if area < 0.0 {
        pts.reverse();
    }
    Some(pts)
}

fn point_in_triangle(p: Point, a: Point, b: Point, c: Point) -> bool {
    cross(a, b, p) >= 0.0 && cross(b, c, p) >= 0.0 && cross(c, a, p) >= 0.0
}

/// Ear clipping of a simple counter-clockwise ring.
fn triangulate(ring: &[Point]) -> Vec<[Point; 3]> {
    let mut idx: Vec<usize> = (0..ring.len()).collect();
    let mut tris = Vec::with_capacity(ring.len().saturating_sub(2));
    while idx.len() > 3 {
        let n = idx.len();
        let mut clipped = false;
        for k in 0..n {
            let (ia, ib, ic) = (idx[(k + n - 1) % n], idx[k], idx[(k + 1) % n]);
            let (a, b, c) = (ring[ia], ring[ib], ring[ic]);
            if cross(a, b, c) <= 0.0 {
                continue;
            }
            let blocked = idx.iter().any(|&j| {
                j != ia
                    && j != ib
                    && j != ic
                    && ring[j] != a
                    && ring[j] != b
                    && ring[j] != c
                    && point_in_triangle(ring[j], a, b, c)
            });
            if blocked {
                continue;
            }
            tris.push([a, b, c]);
            idx.remove(k);
            clipped = true;
            break;
        }
        if !clipped {
            // Numerically degenerate leftover; a fan keeps the total area.
            for k in 1..idx.len() - 1 {
                tris.push([ring[idx[0]], ring[idx[k]], ring[idx[k + 1]]]);
            }
            return tris;
        }
    }
    if idx.len() == 3 {
        tris.push([ring[idx[0]], ring[idx[1]], ring[idx[2]]]);
    }
    tris
}

/// Sutherland-Hodgman clipping of `subject` against a convex
/// counter-clockwise `clip` polygon.
fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let (e0, e1) = (clip[i], clip[(i + 1) % n]);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_in = cross(e0, e1, cur) >= 0.0;
            let prev_in = cross(e0, e1, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, e0, e1));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, e0, e1));
            }
        }
    }
    output
}

fn line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let denom = dp - dq;
    if denom == 0.0 {
        return p;
    }
    let t = dp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of `a ∩ b` for two simple rings.
pub fn polygon_intersection_area(a: &[Point], b: &[Point]) -> f64 {
    let (Some(ra), Some(rb)) = (prepare_ring(a), prepare_ring(b)) else {
        return 0.0;
    };
    intersection_of_prepared(&ra, &rb)
}

fn intersection_of_prepared(ra: &[Point], rb: &[Point]) -> f64 {
    let ba = CenterBox::enclosing(ra).to_corners();
    let bb = CenterBox::enclosing(rb).to_corners();
    if ba.intersection_area(&bb) <= 0.0 {
        return 0.0;
    }
    let ta = triangulate(ra);
    let tb = triangulate(rb);
    let mut total = 0.0;
    for t in &ta {
        for c in &tb {
            let piece = clip_convex(t, c);
            total += signed_area(&piece).abs();
        }
    }
    total
}

/// Intersection over union of two polygons; 0 when the union is empty.
pub fn polygon_iou(a: &[Point], b: &[Point]) -> f64 {
    let (Some(ra), Some(rb)) = (prepare_ring(a), prepare_ring(b)) else {
        return 0.0;
    };
    let inter = intersection_of_prepared(&ra, &rb);
    let union = signed_area(&ra) + signed_area(&rb) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}
