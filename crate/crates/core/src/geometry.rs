//! Homogeneous planar geometry: homographies, their derivatives, dual-feature
//! DLT estimation and line transfer.

use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominators below this are treated as points at infinity.
pub const DENOM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 2D cross product.
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn dist(self, o: Point2) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Counter-clockwise (in y-up terms) perpendicular.
    pub fn perp(self) -> Point2 {
        Point2::new(-self.y, self.x)
    }

    pub fn normalized(self) -> Point2 {
        let n = self.norm();
        Point2::new(self.x / n, self.y / n)
    }

    pub fn lerp(self, o: Point2, t: f64) -> Point2 {
        Point2::new(self.x + (o.x - self.x) * t, self.y + (o.y - self.y) * t)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }
}

impl Div<f64> for Point2 {
    type Output = Point2;
    fn div(self, s: f64) -> Point2 {
        Point2::new(self.x / s, self.y / s)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

impl Mul<Point2> for f64 {
    type Output = Point2;
    fn mul(self, p: Point2) -> Point2 {
        Point2::new(self * p.x, self * p.y)
    }
}

/// Axis-aligned rectangle `[x, x + width) x [y, y + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl Rect {
    pub const fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Rect {
            x,
            y,
            width,
            height,
        }
    }

    /// Rectangle spanned by an image of the given pixel size.
    pub fn of_size(width: usize, height: usize) -> Self {
        Rect::new(0.0, 0.0, width as f64, height as f64)
    }

    pub fn x1(&self) -> f64 {
        self.x + self.width
    }

    pub fn y1(&self) -> f64 {
        self.y + self.height
    }

    pub fn is_empty(&self) -> bool {
        !(self.width > 0.0 && self.height > 0.0)
    }

    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x && p.x < self.x1() && p.y >= self.y && p.y < self.y1()
    }

    /// Closed containment with a tolerance.
    pub fn contains_closed(&self, p: Point2, tol: f64) -> bool {
        p.x >= self.x - tol
            && p.x <= self.x1() + tol
            && p.y >= self.y - tol
            && p.y <= self.y1() + tol
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.x + 0.5 * self.width, self.y + 0.5 * self.height)
    }

    /// Corners in order top-left, top-right, bottom-right, bottom-left.
    pub fn corners(&self) -> [Point2; 4] {
        [
            Point2::new(self.x, self.y),
            Point2::new(self.x1(), self.y),
            Point2::new(self.x1(), self.y1()),
            Point2::new(self.x, self.y1()),
        ]
    }

    pub fn padded(&self, pad: f64) -> Rect {
        Rect::new(
            self.x - pad,
            self.y - pad,
            self.width + 2.0 * pad,
            self.height + 2.0 * pad,
        )
    }
}

/// Line `a x + b y + c = 0` with unit normal `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineEq {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl LineEq {
    /// Normalizes an arbitrary coefficient triple. Fails when `(a, b)` vanishes.
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        let n = a.hypot(b);
        if !(n > 1e-300) || !n.is_finite() {
            return Err(Error::DegenerateConfiguration(
                "line with zero normal".into(),
            ));
        }
        Ok(LineEq {
            a: a / n,
            b: b / n,
            c: c / n,
        })
    }

    pub fn through(p: Point2, q: Point2) -> Result<Self> {
        let d = q - p;
        LineEq::new(-d.y, d.x, d.y * p.x - d.x * p.y)
    }

    /// Line through `p` with direction `dir`.
    pub fn with_direction(p: Point2, dir: Point2) -> Result<Self> {
        LineEq::through(p, p + dir)
    }

    pub fn normal(&self) -> Point2 {
        Point2::new(self.a, self.b)
    }

    /// Unit direction vector.
    pub fn direction(&self) -> Point2 {
        Point2::new(self.b, -self.a)
    }

    pub fn signed_distance(&self, p: Point2) -> f64 {
        self.a * p.x + self.b * p.y + self.c
    }

    pub fn project(&self, p: Point2) -> Point2 {
        let d = self.signed_distance(p);
        Point2::new(p.x - d * self.a, p.y - d * self.b)
    }

    /// Intersection with another line, `None` when parallel.
    pub fn intersect(&self, o: &LineEq) -> Option<Point2> {
        let det = self.a * o.b - self.b * o.a;
        if det.abs() < 1e-14 {
            return None;
        }
        let x = (self.b * o.c - o.b * self.c) / det;
        let y = (o.a * self.c - self.a * o.c) / det;
        Some(Point2::new(x, y))
    }

    /// Same line with the sign of the coefficients flipped if needed so that two
    /// equal lines compare equal.
    pub fn canonical(&self) -> LineEq {
        if self.a < 0.0 || (self.a == 0.0 && self.b < 0.0) {
            LineEq {
                a: -self.a,
                b: -self.b,
                c: -self.c,
            }
        } else {
            *self
        }
    }

    fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.a, self.b, self.c)
    }

    /// Clips the line to a rectangle, returning the chord endpoints.
    pub fn clip(&self, rect: &Rect) -> Option<(Point2, Point2)> {
        let d = self.direction();
        let p0 = self.project(rect.center());
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for (pc, dc, lo, hi) in [
            (p0.x, d.x, rect.x, rect.x1()),
            (p0.y, d.y, rect.y, rect.y1()),
        ] {
            if dc.abs() < 1e-15 {
                if pc < lo - 1e-9 || pc > hi + 1e-9 {
                    return None;
                }
            } else {
                let a = (lo - pc) / dc;
                let b = (hi - pc) / dc;
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
        }
        if t1 < t0 - 1e-12 {
            return None;
        }
        Some((p0 + t0 * d, p0 + t1 * d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    pub start: Point2,
    pub end: Point2,
}

impl LineSegment {
    pub fn new(start: Point2, end: Point2) -> Result<Self> {
        if start.dist(end) <= 0.0 {
            return Err(Error::DegenerateConfiguration("zero-length segment".into()));
        }
        Ok(LineSegment { start, end })
    }

    pub fn length(&self) -> f64 {
        self.start.dist(self.end)
    }

    pub fn line(&self) -> Result<LineEq> {
        LineEq::through(self.start, self.end)
    }

    pub fn direction(&self) -> Point2 {
        (self.end - self.start).normalized()
    }

    pub fn midpoint(&self) -> Point2 {
        self.start.lerp(self.end, 0.5)
    }

    /// `count >= 2` equally spaced points including both endpoints.
    pub fn sample(&self, count: usize) -> Vec<Point2> {
        let count = count.max(2);
        (0..count)
            .map(|k| self.start.lerp(self.end, k as f64 / (count - 1) as f64))
            .collect()
    }

    /// Samples roughly every `spacing` pixels, always at least two points.
    pub fn sample_spaced(&self, spacing: f64) -> Vec<Point2> {
        let n = (self.length() / spacing).ceil().max(1.0) as usize + 1;
        self.sample(n)
    }

    /// The part of the segment inside the closed rectangle, if it has
    /// positive length.
    pub fn clip(&self, rect: &Rect) -> Option<LineSegment> {
        let d = self.end - self.start;
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for (p, dp, lo, hi) in [
            (self.start.x, d.x, rect.x, rect.x1()),
            (self.start.y, d.y, rect.y, rect.y1()),
        ] {
            if dp == 0.0 {
                if p < lo || p > hi {
                    return None;
                }
            } else {
                let (a, b) = ((lo - p) / dp, (hi - p) / dp);
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
        }
        if t1 <= t0 {
            return None;
        }
        LineSegment::new(self.start.lerp(self.end, t0), self.start.lerp(self.end, t1)).ok()
    }
}

/// Point correspondence: `p` in the target image, `p_prime` in the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPair {
    pub p: Point2,
    pub p_prime: Point2,
}

impl PointPair {
    pub fn new(p: Point2, p_prime: Point2) -> Self {
        PointPair { p, p_prime }
    }
}

/// Line correspondence: a segment in the target, an infinite line in the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinePair {
    pub seg: LineSegment,
    pub line: LineEq,
}

/// Planar projective transform with `h9` fixed to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub h: [f64; 8],
}

impl Default for Homography {
    fn default() -> Self {
        Homography::identity()
    }
}

impl Homography {
    pub fn identity() -> Self {
        Homography {
            h: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography {
            h: [1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0],
        }
    }

    /// Rotation by `theta` about the origin, scaled by `scale`, then translated.
    pub fn similarity(scale: f64, theta: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Homography {
            h: [
                scale * c,
                -scale * s,
                tx,
                scale * s,
                scale * c,
                ty,
                0.0,
                0.0,
            ],
        }
    }

    /// Builds from raw parameters, checking nonsingularity.
    pub fn from_params(h: [f64; 8]) -> Result<Self> {
        let m = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
        Homography::from_matrix(&m)
    }

    /// Normalizes a 3x3 matrix to `h9 = 1`: divide by the largest-magnitude entry
    /// first, then by `h9`.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        let scale = m.amax();
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::SingularHomography);
        }
        let m = m / scale;
        if !row_scaled_nonsingular(&m) {
            return Err(Error::SingularHomography);
        }
        let h9 = m[(2, 2)];
        if h9.abs() < 1e-12 {
            return Err(Error::SingularHomography);
        }
        let m = m / h9;
        Ok(Homography {
            h: [
                m[(0, 0)],
                m[(0, 1)],
                m[(0, 2)],
                m[(1, 0)],
                m[(1, 1)],
                m[(1, 2)],
                m[(2, 0)],
                m[(2, 1)],
            ],
        })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let h = &self.h;
        Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0)
    }

    pub fn is_affine(&self) -> bool {
        self.h[6] == 0.0 && self.h[7] == 0.0
    }

    pub fn denominator(&self, p: Point2) -> f64 {
        self.h[6] * p.x + self.h[7] * p.y + 1.0
    }

    pub fn apply(&self, p: Point2) -> Result<Point2> {
        let h = &self.h;
        let w = self.denominator(p);
        if w.abs() <= DENOM_TOL {
            return Err(Error::PointAtInfinity(w));
        }
        Ok(Point2::new(
            (h[0] * p.x + h[1] * p.y + h[2]) / w,
            (h[3] * p.x + h[4] * p.y + h[5]) / w,
        ))
    }

    /// Partial derivatives `(f_x, f_y, g_x, g_y)` at `p`.
    pub fn jacobian(&self, p: Point2) -> Result<(f64, f64, f64, f64)> {
        let h = &self.h;
        let w = self.denominator(p);
        if w.abs() <= DENOM_TOL {
            return Err(Error::PointAtInfinity(w));
        }
        let f = (h[0] * p.x + h[1] * p.y + h[2]) / w;
        let g = (h[3] * p.x + h[4] * p.y + h[5]) / w;
        Ok((
            (h[0] - f * h[6]) / w,
            (h[1] - f * h[7]) / w,
            (h[3] - g * h[6]) / w,
            (h[4] - g * h[7]) / w,
        ))
    }

    pub fn invert(&self) -> Result<Homography> {
        let inv = self
            .matrix()
            .try_inverse()
            .ok_or(Error::SingularHomography)?;
        Homography::from_matrix(&inv)
    }

    /// `self` after `other`: `p -> self(other(p))`.
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        Homography::from_matrix(&(self.matrix() * other.matrix()))
    }

    /// Maps a line through the homography: `l' = H^-T l`.
    pub fn transfer_line(&self, l: &LineEq) -> Result<LineEq> {
        let inv = self
            .matrix()
            .try_inverse()
            .ok_or(Error::SingularHomography)?;
        let v = inv.transpose() * l.as_vector();
        LineEq::new(v[0], v[1], v[2]).map_err(|_| Error::SingularHomography)
    }

    /// Frobenius distance between normalized parameter vectors.
    pub fn param_distance(&self, o: &Homography) -> f64 {
        self.h
            .iter()
            .zip(o.h.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

fn row_scaled_nonsingular(m: &Matrix3<f64>) -> bool {
    let mut r = *m;
    for i in 0..3 {
        let n = r.row(i).norm();
        if n == 0.0 {
            return false;
        }
        for j in 0..3 {
            r[(i, j)] /= n;
        }
    }
    r.determinant().abs() > 1e-12
}

/// Isotropic similarity taking a point set's centroid to the origin and its
/// mean distance to `sqrt(2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditioner {
    pub cx: f64,
    pub cy: f64,
    pub s: f64,
}

impl Conditioner {
    pub fn identity() -> Self {
        Conditioner {
            cx: 0.0,
            cy: 0.0,
            s: 1.0,
        }
    }

    pub fn fit(points: &[Point2]) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        let n = points.len() as f64;
        let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
        let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
        let mean = points
            .iter()
            .map(|p| (p.x - cx).hypot(p.y - cy))
            .sum::<f64>()
            / n;
        if !(mean > 1e-12) {
            return None;
        }
        Some(Conditioner {
            cx,
            cy,
            s: std::f64::consts::SQRT_2 / mean,
        })
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        Point2::new(self.s * (p.x - self.cx), self.s * (p.y - self.cy))
    }

    /// The line in conditioned coordinates, renormalized.
    pub fn apply_line(&self, l: &LineEq) -> LineEq {
        LineEq {
            a: l.a,
            b: l.b,
            c: self.s * (l.a * self.cx + l.b * self.cy + l.c),
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.s,
            0.0,
            -self.s * self.cx,
            0.0,
            self.s,
            -self.s * self.cy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.s,
            0.0,
            self.cx,
            0.0,
            1.0 / self.s,
            self.cy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Conditioned DLT design rows plus the locations each row is tied to, so
/// callers can reweight rows (moving DLT) without rebuilding them.
#[derive(Debug, Clone)]
pub struct DltSystem {
    pub rows: Vec<[f64; 9]>,
    /// Target-image location(s) of each row; line rows carry both endpoints.
    pub sites: Vec<RowSite>,
    pub target_cond: Conditioner,
    pub ref_cond: Conditioner,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowSite {
    Point(Point2),
    Line(Point2, Point2),
}

impl DltSystem {
    pub fn build(points: &[PointPair], lines: &[LinePair]) -> Result<Self> {
        let equations = 2 * points.len() + 2 * lines.len();
        if equations < 8 {
            return Err(Error::DegenerateConfiguration(format!(
                "{equations} scalar equations, need at least 8"
            )));
        }
        let mut target_pts: Vec<Point2> = points.iter().map(|pp| pp.p).collect();
        for lp in lines {
            target_pts.push(lp.seg.start);
            target_pts.push(lp.seg.end);
        }
        let target_cond = Conditioner::fit(&target_pts)
            .ok_or_else(|| Error::DegenerateConfiguration("all target points coincide".into()))?;
        let ref_pts: Vec<Point2> = points.iter().map(|pp| pp.p_prime).collect();
        let ref_cond = match Conditioner::fit(&ref_pts) {
            Some(c) if ref_pts.len() >= 2 => c,
            _ => target_cond,
        };

        let mut rows = Vec::with_capacity(equations);
        let mut sites = Vec::with_capacity(equations);
        for pp in points {
            let p = target_cond.apply(pp.p);
            let q = ref_cond.apply(pp.p_prime);
            let (x, y) = (p.x, p.y);
            let (u, v) = (q.x, q.y);
            rows.push([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
            rows.push([x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u]);
            sites.push(RowSite::Point(pp.p));
            sites.push(RowSite::Point(pp.p));
        }
        for lp in lines {
            let l = ref_cond.apply_line(&lp.line);
            for q in [lp.seg.start, lp.seg.end] {
                let q = target_cond.apply(q);
                let (x, y) = (q.x, q.y);
                rows.push([
                    l.a * x,
                    l.a * y,
                    l.a,
                    l.b * x,
                    l.b * y,
                    l.b,
                    l.c * x,
                    l.c * y,
                    l.c,
                ]);
                sites.push(RowSite::Line(lp.seg.start, lp.seg.end));
            }
        }
        Ok(DltSystem {
            rows,
            sites,
            target_cond,
            ref_cond,
        })
    }

    /// Solves with every row scaled by the matching weight (all ones if `None`).
    pub fn solve(&self, weights: Option<&[f64]>) -> Result<Homography> {
        let m = self.rows.len().max(9);
        let mut a = DMatrix::<f64>::zeros(m, 9);
        for (i, row) in self.rows.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            for j in 0..9 {
                a[(i, j)] = w * row[j];
            }
        }
        let svd = a.svd(false, true);
        let v_t = svd
            .v_t
            .ok_or_else(|| Error::DegenerateConfiguration("svd failed".into()))?;
        let sv = &svd.singular_values;
        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
        let largest = sv[order[order.len() - 1]];
        if !(largest > 0.0) || sv[order[1]] < 1e-10 * largest {
            return Err(Error::DegenerateConfiguration(
                "design matrix has a multi-dimensional null space".into(),
            ));
        }
        let h = v_t.row(order[0]);
        let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
        let full = self.ref_cond.inverse_matrix() * hn * self.target_cond.matrix();
        Homography::from_matrix(&full)
            .map_err(|_| Error::DegenerateConfiguration("estimate is singular".into()))
    }
}

/// Dual-feature DLT: least-squares algebraic fit to point and line correspondences.
pub fn estimate_dlt(points: &[PointPair], lines: &[LinePair]) -> Result<Homography> {
    DltSystem::build(points, lines)?.solve(None)
}

/// Convex hull by monotone chain, counter-clockwise in y-up terms, without
/// repeated endpoints. Collinear points are dropped.
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = points.iter().copied().filter(|p| p.is_finite()).collect();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point2> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point2>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                if (b - a).cross(p - a) <= 0.0 {
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

/// Shoelace area (positive for counter-clockwise order in y-up terms).
pub fn polygon_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| poly[i].cross(poly[(i + 1) % n]))
        .sum::<f64>()
        * 0.5
}

/// Area centroid of a simple polygon; falls back to the vertex mean for
/// degenerate polygons.
pub fn polygon_centroid(poly: &[Point2]) -> Point2 {
    let n = poly.len();
    let a = polygon_area(poly);
    if n < 3 || a.abs() < 1e-12 {
        let m = poly.iter().fold(Point2::default(), |acc, &p| acc + p);
        return m / n.max(1) as f64;
    }
    let mut c = Point2::default();
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        let k = p.cross(q);
        c = c + k * (p + q);
    }
    c / (6.0 * a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proj() -> Homography {
        Homography::from_params([0.9, 0.12, 15.0, -0.05, 1.1, -7.0, 4e-4, -2e-4]).unwrap()
    }

    // Homogeneous-coordinate oracle: multiply, then dehomogenize.
    fn oracle_apply(h: &Homography, p: Point2) -> Point2 {
        let v = h.matrix() * Vector3::new(p.x, p.y, 1.0);
        Point2::new(v[0] / v[2], v[1] / v[2])
    }

    #[test]
    fn apply_cases() {
        let p = Homography::identity().apply(Point2::new(3.0, 7.0)).unwrap();
        assert_eq!(p, Point2::new(3.0, 7.0));
        let t = Homography::translation(5.0, -2.0);
        assert_eq!(
            t.apply(Point2::new(0.0, 0.0)).unwrap(),
            Point2::new(5.0, -2.0)
        );
        let h = proj();
        for p in [Point2::new(10.0, 20.0), Point2::new(-300.0, 512.5)] {
            let a = h.apply(p).unwrap();
            let b = oracle_apply(&h, p);
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn apply_at_infinity() {
        let h = Homography::from_params([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.01, 0.0]).unwrap();
        assert!(matches!(
            h.apply(Point2::new(-100.0, 3.0)),
            Err(Error::PointAtInfinity(_))
        ));
        assert!(h.jacobian(Point2::new(-100.0, 3.0)).is_err());
    }

    #[test]
    fn jacobian_cases() {
        assert_eq!(
            Homography::identity()
                .jacobian(Point2::new(4.0, -9.0))
                .unwrap(),
            (1.0, 0.0, 0.0, 1.0)
        );
        let aff = Homography::from_params([2.0, 0.5, 1.0, -0.3, 1.5, 2.0, 0.0, 0.0]).unwrap();
        for p in [Point2::new(0.0, 0.0), Point2::new(100.0, -40.0)] {
            assert_eq!(aff.jacobian(p).unwrap(), (2.0, 0.5, -0.3, 1.5));
        }
        let h = proj();
        let p = Point2::new(10.0, 20.0);
        let (fx, fy, gx, gy) = h.jacobian(p).unwrap();
        let e = 1e-5;
        let dx = (oracle_apply(&h, Point2::new(p.x + e, p.y))
            - oracle_apply(&h, Point2::new(p.x - e, p.y)))
        .x / (2.0 * e);
        let dyx = (oracle_apply(&h, Point2::new(p.x, p.y + e))
            - oracle_apply(&h, Point2::new(p.x, p.y - e)))
            / (2.0 * e);
        let dxg = (oracle_apply(&h, Point2::new(p.x + e, p.y))
            - oracle_apply(&h, Point2::new(p.x - e, p.y)))
        .y / (2.0 * e);
        for (a, b) in [(fx, dx), (fy, dyx.x), (gx, dxg), (gy, dyx.y)] {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn invert_cases() {
        assert_eq!(
            Homography::identity().invert().unwrap(),
            Homography::identity()
        );
        let t = Homography::translation(5.0, -2.0).invert().unwrap();
        assert!(t.param_distance(&Homography::translation(-5.0, 2.0)) < 1e-15);
        let singular = Homography {
            h: [1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0],
        };
        assert_eq!(singular.invert(), Err(Error::SingularHomography));
    }

    #[test]
    fn transfer_line_cases() {
        let l = LineEq::new(1.0, 0.0, -5.0).unwrap();
        assert_eq!(Homography::identity().transfer_line(&l).unwrap(), l);
        let l0 = LineEq::new(1.0, 0.0, 0.0).unwrap();
        let moved = Homography::translation(5.0, 0.0)
            .transfer_line(&l0)
            .unwrap();
        assert!(
            (moved.a - 1.0).abs() < 1e-15 && moved.b.abs() < 1e-15 && (moved.c + 5.0).abs() < 1e-12
        );
    }

    #[test]
    fn normalization_rejects_vanishing_h9() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1e-14);
        assert_eq!(Homography::from_matrix(&m), Err(Error::SingularHomography));
    }

    #[test]
    fn dlt_identity_from_four_points() {
        let pts: Vec<PointPair> = [(0.0, 0.0), (100.0, 0.0), (100.0, 80.0), (0.0, 80.0)]
            .iter()
            .map(|&(x, y)| PointPair::new(Point2::new(x, y), Point2::new(x, y)))
            .collect();
        let h = estimate_dlt(&pts, &[]).unwrap();
        assert!(h.param_distance(&Homography::identity()) < 1e-9);
    }

    #[test]
    fn dlt_too_few_equations() {
        let pts = vec![PointPair::new(Point2::new(0.0, 0.0), Point2::new(0.0, 0.0)); 3];
        assert!(matches!(
            estimate_dlt(&pts, &[]),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn dlt_collinear_is_degenerate() {
        let pts: Vec<PointPair> = (0..6)
            .map(|i| {
                let p = Point2::new(i as f64 * 10.0, i as f64 * 5.0);
                PointPair::new(p, p)
            })
            .collect();
        assert!(matches!(
            estimate_dlt(&pts, &[]),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn line_clip_and_intersect() {
        let r = Rect::new(0.0, 0.0, 100.0, 50.0);
        let l = LineEq::new(1.0, 0.0, -30.0).unwrap();
        let (a, b) = l.clip(&r).unwrap();
        assert!((a.x - 30.0).abs() < 1e-12 && (b.x - 30.0).abs() < 1e-12);
        assert!((a.y - b.y).abs() - 50.0 < 1e-12);
        let far = LineEq::new(1.0, 0.0, -300.0).unwrap();
        assert!(far.clip(&r).is_none());
        let h = LineEq::new(0.0, 1.0, -10.0).unwrap();
        let x = l.intersect(&h).unwrap();
        assert!((x.x - 30.0).abs() < 1e-12 && (x.y - 10.0).abs() < 1e-12);
    }

    #[test]
    fn segment_clip() {
        let r = Rect::new(0.0, 0.0, 100.0, 50.0);
        let s = LineSegment::new(Point2::new(-10.0, 25.0), Point2::new(110.0, 25.0)).unwrap();
        let c = s.clip(&r).unwrap();
        assert_eq!(
            (c.start, c.end),
            (Point2::new(0.0, 25.0), Point2::new(100.0, 25.0))
        );
        let inside = LineSegment::new(Point2::new(5.0, 5.0), Point2::new(20.0, 40.0)).unwrap();
        assert_eq!(inside.clip(&r), Some(inside));
        let outside = LineSegment::new(Point2::new(-5.0, -5.0), Point2::new(-1.0, 60.0)).unwrap();
        assert!(outside.clip(&r).is_none());
    }
}
