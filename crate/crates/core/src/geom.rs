//! Oriented boxes, their polygon form, and rotated IoU.
//!
//! Angles are radians. The canonical form of an [`OBox`] puts the long side
//! first (`w >= h`) and the angle in `[-pi/2, pi/2)`; squares are reduced to
//! an angle in `[-pi/2, 0)`. Canonicalization is explicit: constructing a box
//! only validates it, so a square prior can keep `theta = 0`.

use std::cmp::Ordering;
use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn distance(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

/// Oriented bounding box in pixels: center, extents, rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 5]", into = "[f64; 5]")]
pub struct OBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl TryFrom<[f64; 5]> for OBox {
    type Error = Error;

    fn try_from(v: [f64; 5]) -> Result<Self> {
        OBox::new(v[0], v[1], v[2], v[3], v[4])
    }
}

impl From<OBox> for [f64; 5] {
    fn from(b: OBox) -> Self {
        [b.cx, b.cy, b.w, b.h, b.theta]
    }
}

impl OBox {
    /// Validates finiteness and strictly positive extents.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        let b = OBox {
            cx,
            cy,
            w,
            h,
            theta,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.cx, self.cy, self.w, self.h, self.theta];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite field in {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "extents must be positive, got w={} h={}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `sqrt(w * h)`, the size used for scale buckets.
    pub fn size(&self) -> f64 {
        self.area().sqrt()
    }

    pub fn is_canonical(&self) -> bool {
        if self.w < self.h || !(-FRAC_PI_2..FRAC_PI_2).contains(&self.theta) {
            return false;
        }
        self.w != self.h || self.theta < 0.0
    }

    /// Geometrically identical box in canonical form. Canonical boxes are
    /// returned unchanged, so the operation is idempotent bit-for-bit.
    pub fn canonical(&self) -> OBox {
        if self.is_canonical() {
            return *self;
        }
        let (w, h, theta) = if self.w >= self.h {
            (self.w, self.h, self.theta)
        } else {
            (self.h, self.w, self.theta + FRAC_PI_2)
        };
        let period = if w == h { FRAC_PI_2 } else { PI };
        let mut t = (theta + FRAC_PI_2).rem_euclid(period) - FRAC_PI_2;
        // rem_euclid may round up to exactly `period`
        if t >= -FRAC_PI_2 + period {
            t -= period;
        }
        OBox {
            cx: self.cx,
            cy: self.cy,
            w,
            h,
            theta: t,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> OBox {
        OBox {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Rotates the box by `angle` about `pivot`.
    pub fn rotated_about(&self, pivot: Point, angle: f64) -> OBox {
        let (s, c) = angle.sin_cos();
        let d = self.center().sub(pivot);
        OBox {
            cx: pivot.x + c * d.x - s * d.y,
            cy: pivot.y + s * d.x + c * d.y,
            theta: self.theta + angle,
            ..*self
        }
    }

    /// Multiplies position and extents by `factor`.
    pub fn scaled(&self, factor: f64) -> OBox {
        OBox {
            cx: self.cx * factor,
            cy: self.cy * factor,
            w: self.w * factor,
            h: self.h * factor,
            theta: self.theta,
        }
    }

    /// Axis-aligned bounds as `(xmin, ymin, xmax, ymax)`.
    pub fn aabb(&self) -> (f64, f64, f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let hx = 0.5 * (self.w * c.abs() + self.h * s.abs());
        let hy = 0.5 * (self.w * s.abs() + self.h * c.abs());
        (self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy)
    }

    /// Point membership, boundary inclusive.
    pub fn contains(&self, p: Point) -> bool {
        LocalFrame::new(self).contains(p.x, p.y)
    }

    fn total_cmp(&self, o: &OBox) -> Ordering {
        self.cx
            .total_cmp(&o.cx)
            .then(self.cy.total_cmp(&o.cy))
            .then(self.w.total_cmp(&o.w))
            .then(self.h.total_cmp(&o.h))
            .then(self.theta.total_cmp(&o.theta))
    }
}

/// Canonicalizes after validating the box.
pub fn canonicalize(b: OBox) -> Result<OBox> {
    b.validate()?;
    Ok(b.canonical())
}

/// Convex quadrilateral with counter-clockwise vertices (positive shoelace area).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quad {
    vertices: [Point; 4],
}

impl Quad {
    /// Accepts a strictly convex, counter-clockwise vertex ring.
    pub fn new(vertices: [Point; 4]) -> Result<Self> {
        if vertices
            .iter()
            .any(|p| !p.x.is_finite() || !p.y.is_finite())
        {
            return Err(Error::InvalidQuad("non-finite vertex".into()));
        }
        for i in 0..4 {
            let a = vertices[i];
            let b = vertices[(i + 1) % 4];
            let c = vertices[(i + 2) % 4];
            if b.sub(a).cross(c.sub(b)) <= 0.0 {
                return Err(Error::InvalidQuad(
                    "vertices are not a convex counter-clockwise ring".into(),
                ));
            }
        }
        Ok(Quad { vertices })
    }

    pub fn vertices(&self) -> &[Point; 4] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        shoelace(&self.vertices)
    }

    pub fn centroid(&self) -> Point {
        let sx: f64 = self.vertices.iter().map(|p| p.x).sum();
        let sy: f64 = self.vertices.iter().map(|p| p.y).sum();
        Point::new(sx / 4.0, sy / 4.0)
    }
}

/// Corners of the rotated rectangle, counter-clockwise.
pub fn quad_from_box(b: &OBox) -> Quad {
    let (s, c) = b.theta.sin_cos();
    let (hw, hh) = (0.5 * b.w, 0.5 * b.h);
    let corner = |dx: f64, dy: f64| Point::new(b.cx + dx * c - dy * s, b.cy + dx * s + dy * c);
    Quad {
        vertices: [
            corner(-hw, -hh),
            corner(hw, -hh),
            corner(hw, hh),
            corner(-hw, hh),
        ],
    }
}

/// Minimum-area rotated rectangle enclosing four points given in any order,
/// returned in canonical form.
pub fn box_from_quad(points: &[Point; 4]) -> Result<OBox> {
    if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::InvalidQuad("non-finite vertex".into()));
    }
    let hull = convex_hull(points);
    let (xmin, ymin, xmax, ymax) = points.iter().fold(
        (
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ),
        |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
    );
    let span2 = (xmax - xmin).powi(2) + (ymax - ymin).powi(2);
    if hull.len() < 3 || shoelace(&hull) <= 1e-12 * span2 {
        return Err(Error::InvalidQuad("degenerate (collinear) vertices".into()));
    }

    let mut best: Option<(f64, OBox)> = None;
    for i in 0..hull.len() {
        let e = hull[(i + 1) % hull.len()].sub(hull[i]);
        let len = e.dot(e).sqrt();
        if len == 0.0 {
            continue;
        }
        let u = Point::new(e.x / len, e.y / len);
        let v = Point::new(-u.y, u.x);
        let (mut umin, mut umax, mut vmin, mut vmax) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for p in &hull {
            let pu = p.dot(u);
            let pv = p.dot(v);
            umin = umin.min(pu);
            umax = umax.max(pu);
            vmin = vmin.min(pv);
            vmax = vmax.max(pv);
        }
        let area = (umax - umin) * (vmax - vmin);
        if best.as_ref().is_some_and(|(a, _)| *a <= area) {
            continue;
        }
        let mu = 0.5 * (umin + umax);
        let mv = 0.5 * (vmin + vmax);
        let candidate = OBox {
            cx: mu * u.x + mv * v.x,
            cy: mu * u.y + mv * v.y,
            w: umax - umin,
            h: vmax - vmin,
            theta: u.y.atan2(u.x),
        };
        best = Some((area, candidate));
    }
    let (_, b) = best.ok_or_else(|| Error::InvalidQuad("no hull edge".into()))?;
    canonicalize(b).map_err(|e| Error::InvalidQuad(e.to_string()))
}

fn shoelace(pts: &[Point]) -> f64 {
    let n = pts.len();
    let twice: f64 = (0..n).map(|i| pts[i].cross(pts[(i + 1) % n])).sum();
    0.5 * twice
}

/// Andrew's monotone chain; counter-clockwise, collinear points dropped.
fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                if b.sub(a).cross(p.sub(b)) <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Sutherland-Hodgman clip of a convex polygon against a convex CCW clip polygon.
fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    let mut input: Vec<Point> = Vec::with_capacity(8);
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let edge = clip[(i + 1) % clip.len()].sub(a);
        std::mem::swap(&mut input, &mut output);
        output.clear();
        let side = |p: Point| edge.cross(p.sub(a));
        let mut prev = input[input.len() - 1];
        let mut prev_side = side(prev);
        for &cur in &input {
            let cur_side = side(cur);
            if cur_side >= 0.0 {
                if prev_side < 0.0 {
                    output.push(lerp_at_zero(prev, cur, prev_side, cur_side));
                }
                output.push(cur);
            } else if prev_side >= 0.0 {
                output.push(lerp_at_zero(prev, cur, prev_side, cur_side));
            }
            prev = cur;
            prev_side = cur_side;
        }
    }
    output
}

// The two side values have opposite signs, so the denominator is nonzero.
fn lerp_at_zero(p: Point, q: Point, sp: f64, sq: f64) -> Point {
    let t = sp / (sp - sq);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Area of the intersection of two oriented boxes.
pub fn intersection_area(a: &OBox, b: &OBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.aabb();
    let (bx0, by0, bx1, by1) = b.aabb();
    if ax1 <= bx0 || bx1 <= ax0 || ay1 <= by0 || by1 <= ay0 {
        return 0.0;
    }
    let qa = quad_from_box(a);
    let qb = quad_from_box(b);
    let poly = clip_convex(qa.vertices(), qb.vertices());
    if poly.len() < 3 {
        return 0.0;
    }
    shoelace(&poly).max(0.0)
}

/// Rotated IoU by convex clipping and shoelace areas. Symmetric bit-for-bit:
/// the pair is put in a fixed order before clipping.
pub fn rotated_iou(a: &OBox, b: &OBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let (first, second) = if a.total_cmp(b) == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    };
    let inter = intersection_area(first, second);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = first.area() + second.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    /// Points actually drawn (the largest square grid not exceeding the request).
    pub samples: usize,
}

struct LocalFrame {
    cx: f64,
    cy: f64,
    c: f64,
    s: f64,
    hw: f64,
    hh: f64,
}

impl LocalFrame {
    fn new(b: &OBox) -> Self {
        let (s, c) = b.theta.sin_cos();
        LocalFrame {
            cx: b.cx,
            cy: b.cy,
            c,
            s,
            hw: 0.5 * b.w,
            hh: 0.5 * b.h,
        }
    }

    #[inline]
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        (dx * self.c + dy * self.s).abs() <= self.hw && (dy * self.c - dx * self.s).abs() <= self.hh
    }
}

/// Monte-Carlo IoU over the joint axis-aligned bounding box.
///
/// Points are drawn with jittered stratification: the box is cut into a
/// `k x k` grid (`k = floor(sqrt(n_samples))`) and one uniform point is drawn
/// per cell, so every point is marginally uniform over the box. The reported
/// `stderr` is the binomial standard error of the ratio of hit counts, which
/// bounds the stratified estimator's spread from above. Requests below 1000
/// samples are raised to 1000.
pub fn mc_iou(a: &OBox, b: &OBox, n_samples: usize, seed: u64) -> McEstimate {
    let k = (n_samples.max(1000) as f64).sqrt().floor() as usize;
    let (ax0, ay0, ax1, ay1) = a.aabb();
    let (bx0, by0, bx1, by1) = b.aabb();
    let (x0, y0) = (ax0.min(bx0), ay0.min(by0));
    let (x1, y1) = (ax1.max(bx1), ay1.max(by1));
    let (dx, dy) = ((x1 - x0) / k as f64, (y1 - y0) / k as f64);

    let fa = LocalFrame::new(a);
    let fb = LocalFrame::new(b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut both, mut either) = (0u64, 0u64);
    for i in 0..k {
        let cell_y = y0 + i as f64 * dy;
        for j in 0..k {
            let x = x0 + (j as f64 + rng.gen::<f64>()) * dx;
            let y = cell_y + rng.gen::<f64>() * dy;
            let in_a = fa.contains(x, y);
            let in_b = fb.contains(x, y);
            both += (in_a && in_b) as u64;
            either += (in_a || in_b) as u64;
        }
    }
    let samples = k * k;
    if either == 0 {
        return McEstimate {
            estimate: 0.0,
            stderr: 0.0,
            samples,
        };
    }
    let p = both as f64 / either as f64;
    McEstimate {
        estimate: p,
        stderr: (p * (1.0 - p) / either as f64).sqrt(),
        samples,
    }
}

/// Converts a box angle to the dataset convention: degrees in `(0, 90]`
/// measured from the horizontal axis to the box edge.
pub fn dataset_angle_deg(b: &OBox) -> f64 {
    let d = b.theta.to_degrees().rem_euclid(90.0);
    if d <= 0.0 || d >= 90.0 {
        90.0
    } else {
        d
    }
}

/// `(cx, cy, w, h, degrees)` with the angle in `(0, 90]` and `w` the extent
/// along the rotated horizontal axis.
pub fn to_dataset_form(b: &OBox) -> [f64; 5] {
    let deg = dataset_angle_deg(b);
    // Quarter turns between the internal angle and the reported one decide
    // whether the extents swap.
    let quarter_turns = ((b.theta.to_degrees() - deg) / 90.0).round() as i64;
    let (w, h) = if quarter_turns.rem_euclid(2) == 0 {
        (b.w, b.h)
    } else {
        (b.h, b.w)
    };
    [b.cx, b.cy, w, h, deg]
}

pub fn from_dataset_form(v: [f64; 5]) -> Result<OBox> {
    OBox::new(v[0], v[1], v[2], v[3], v[4].to_radians()).map(|b| b.canonical())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn obox(cx: f64, cy: f64, w: f64, h: f64, t: f64) -> OBox {
        OBox::new(cx, cy, w, h, t).unwrap()
    }

    fn vertex_sets_match(a: &Quad, b: &Quad, tol: f64) -> bool {
        a.vertices()
            .iter()
            .all(|p| b.vertices().iter().any(|q| p.distance(*q) < tol))
    }

    #[test]
    fn canonicalize_swaps_short_first() {
        let c = canonicalize(obox(0.0, 0.0, 2.0, 4.0, 0.0)).unwrap();
        assert_eq!((c.w, c.h), (4.0, 2.0));
        assert_abs_diff_eq!(c.theta, -FRAC_PI_2, epsilon = 1e-15);
    }

    #[test]
    fn canonicalize_keeps_canonical() {
        let b = obox(0.0, 0.0, 4.0, 2.0, 0.0);
        assert_eq!(canonicalize(b).unwrap(), b);
    }

    #[test]
    fn canonicalize_preserves_vertex_set() {
        let b = obox(1.0, 1.0, 3.0, 5.0, PI / 3.0);
        let c = b.canonical();
        assert!(c.is_canonical());
        assert!(vertex_sets_match(
            &quad_from_box(&b),
            &quad_from_box(&c),
            1e-9
        ));
    }

    #[test]
    fn square_tie_break() {
        let c = obox(0.0, 0.0, 3.0, 3.0, 0.0).canonical();
        assert_abs_diff_eq!(c.theta, -FRAC_PI_2, epsilon = 1e-15);
        let c = obox(0.0, 0.0, 3.0, 3.0, 1.2).canonical();
        assert!((-FRAC_PI_2..0.0).contains(&c.theta));
        assert_abs_diff_eq!(c.theta, 1.2 - PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(OBox::new(0.0, 0.0, 0.0, 1.0, 0.0).is_err());
        assert!(OBox::new(0.0, 0.0, 1.0, -1.0, 0.0).is_err());
        assert!(OBox::new(f64::NAN, 0.0, 1.0, 1.0, 0.0).is_err());
        assert!(OBox::new(0.0, 0.0, 1.0, 1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn quad_of_axis_aligned_box() {
        let q = quad_from_box(&obox(0.0, 0.0, 2.0, 2.0, 0.0));
        let expected = Quad::new([
            Point::new(-1.0, -1.0),
            Point::new(1.0, -1.0),
            Point::new(1.0, 1.0),
            Point::new(-1.0, 1.0),
        ])
        .unwrap();
        assert!(vertex_sets_match(&q, &expected, 1e-12));
        assert_abs_diff_eq!(q.area(), 4.0, epsilon = 1e-12);

        let moved = quad_from_box(&obox(5.0, 5.0, 2.0, 2.0, 0.0));
        for (p, r) in moved.vertices().iter().zip(q.vertices()) {
            assert_abs_diff_eq!(p.x, r.x + 5.0, epsilon = 1e-12);
            assert_abs_diff_eq!(p.y, r.y + 5.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn quad_of_diamond() {
        let q = quad_from_box(&obox(0.0, 0.0, 2.0, 2.0, PI / 4.0));
        let s2 = 2f64.sqrt();
        let axes = [(s2, 0.0), (0.0, s2), (-s2, 0.0), (0.0, -s2)];
        for (x, y) in axes {
            assert!(q
                .vertices()
                .iter()
                .any(|p| (p.x - x).abs() < 1e-12 && (p.y - y).abs() < 1e-12));
        }
        let c = q.centroid();
        assert_abs_diff_eq!(c.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn quad_new_rejects_clockwise() {
        let cw = [
            Point::new(0.0, 0.0),
            Point::new(0.0, 1.0),
            Point::new(1.0, 1.0),
            Point::new(1.0, 0.0),
        ];
        assert!(Quad::new(cw).is_err());
    }

    #[test]
    fn unit_square_from_quad() {
        let pts = [
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(0.0, 1.0),
        ];
        let b = box_from_quad(&pts).unwrap();
        assert_abs_diff_eq!(b.cx, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b.cy, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b.w, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.h, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.theta, -FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn collinear_quad_rejected() {
        let pts = [
            Point::new(0.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(2.0, 2.0),
            Point::new(3.0, 3.0),
        ];
        assert!(matches!(box_from_quad(&pts), Err(Error::InvalidQuad(_))));
        let repeated = [Point::new(1.0, 1.0); 4];
        assert!(box_from_quad(&repeated).is_err());
    }

    #[test]
    fn box_quad_round_trip_1000() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let b = obox(
                rng.gen_range(-500.0..500.0),
                rng.gen_range(-500.0..500.0),
                rng.gen_range(0.5..100.0),
                rng.gen_range(0.5..100.0),
                rng.gen_range(-PI..PI),
            )
            .canonical();
            let r = box_from_quad(quad_from_box(&b).vertices()).unwrap();
            let e = [
                r.cx - b.cx,
                r.cy - b.cy,
                r.w - b.w,
                r.h - b.h,
                r.theta - b.theta,
            ]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
            worst = worst.max(e);
        }
        assert!(worst < 1e-6, "worst component error {worst}");
    }

    #[test]
    fn iou_examples() {
        let a = obox(0.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(rotated_iou(&a, &a), 1.0);
        let b = obox(0.5, 0.0, 1.0, 1.0, 0.0);
        assert_abs_diff_eq!(rotated_iou(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
        let far = obox(10.0, 0.0, 1.0, 1.0, 0.3);
        assert_eq!(rotated_iou(&a, &far), 0.0);
        // Regular octagon: intersection 2(sqrt2 - 1), union 2 - that.
        let r = obox(0.0, 0.0, 1.0, 1.0, PI / 4.0);
        let inter = 2.0 * (2f64.sqrt() - 1.0);
        assert_abs_diff_eq!(rotated_iou(&a, &r), inter / (2.0 - inter), epsilon = 1e-12);
    }

    #[test]
    fn iou_of_diamond_matches_monte_carlo() {
        let a = obox(0.0, 0.0, 1.0, 1.0, 0.0);
        let r = obox(0.0, 0.0, 1.0, 1.0, PI / 4.0);
        let mc = mc_iou(&a, &r, 10_000_000, 5);
        let exact = rotated_iou(&a, &r);
        assert!((exact - mc.estimate).abs() <= 3.0 * mc.stderr);
        assert!((exact - 0.707).abs() < 1e-3);
    }

    #[test]
    fn mc_trivial_cases() {
        let a = obox(3.0, -2.0, 5.0, 2.0, 0.4);
        for seed in 0..3 {
            assert_eq!(mc_iou(&a, &a, 2000, seed).estimate, 1.0);
        }
        let far = obox(50.0, 0.0, 5.0, 2.0, 0.4);
        assert_eq!(mc_iou(&a, &far, 2000, 1).estimate, 0.0);
        let a = obox(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = obox(0.5, 0.0, 1.0, 1.0, 0.0);
        let mc = mc_iou(&a, &b, 1_000_000, 9);
        assert!((mc.estimate - 1.0 / 3.0).abs() <= 3.0 * mc.stderr);
        assert_eq!(mc, mc_iou(&a, &b, 1_000_000, 9));
    }

    #[test]
    fn dataset_angle_convention() {
        let b = obox(0.0, 0.0, 4.0, 2.0, 0.0);
        assert_eq!(dataset_angle_deg(&b), 90.0);
        let f = to_dataset_form(&b);
        assert_eq!((f[2], f[3], f[4]), (2.0, 4.0, 90.0));
        let b = obox(0.0, 0.0, 4.0, 2.0, -PI / 6.0);
        let f = to_dataset_form(&b);
        assert_abs_diff_eq!(f[4], 60.0, epsilon = 1e-9);
        let back = from_dataset_form(f).unwrap();
        assert!(vertex_sets_match(
            &quad_from_box(&b),
            &quad_from_box(&back),
            1e-9
        ));
    }

    fn arb_box() -> impl Strategy<Value = OBox> {
        (
            -100.0..100.0f64,
            -100.0..100.0f64,
            0.5..40.0f64,
            0.5..40.0f64,
            -PI..PI,
        )
            .prop_map(|(cx, cy, w, h, t)| obox(cx, cy, w, h, t))
    }

    proptest! {
        #[test]
        fn canonical_is_idempotent(b in arb_box()) {
            let c = b.canonical();
            prop_assert!(c.is_canonical());
            prop_assert_eq!(c.canonical(), c);
        }

        #[test]
        fn iou_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(rotated_iou(&a, &b), rotated_iou(&b, &a));
        }

        #[test]
        fn iou_rigid_motion_invariant(
            a in arb_box(),
            d in (-5.0..5.0f64, -5.0..5.0f64, 0.5..30.0f64, 0.5..30.0f64, -PI..PI),
            angle in -PI..PI,
            shift in (-300.0..300.0f64, -300.0..300.0f64),
        ) {
            let b = obox(a.cx + d.0, a.cy + d.1, d.2, d.3, d.4);
            let pivot = Point::new(17.0, -4.0);
            let ta = a.rotated_about(pivot, angle).translated(shift.0, shift.1);
            let tb = b.rotated_about(pivot, angle).translated(shift.0, shift.1);
            prop_assert!((rotated_iou(&a, &b) - rotated_iou(&ta, &tb)).abs() < 1e-9);
        }

        #[test]
        fn iou_side_swap_invariant(a in arb_box(), b in arb_box()) {
            let swapped = obox(a.cx, a.cy, a.h, a.w, a.theta + FRAC_PI_2);
            prop_assert!((rotated_iou(&a, &b) - rotated_iou(&swapped, &b)).abs() < 1e-9);
        }

        #[test]
        fn quad_centroid_is_center(b in arb_box()) {
            let c = quad_from_box(&b).centroid();
            prop_assert!((c.x - b.cx).abs() < 1e-9 && (c.y - b.cy).abs() < 1e-9);
        }
    }
}
