//! Quasi-homography warps.
//!
//! A homography keeps exactly one family of parallel lines parallel. The
//! quasi-homography follows the homography along that family but stays linear
//! across it, which limits projective stretch in the non-overlapping region.

use serde::{Deserialize, Serialize};

use crate::apap::LocalWarpField;
use crate::error::{Error, Result};
use crate::geometry::{
    convex_hull, polygon_area, polygon_centroid, Homography, LineEq, Point2, Rect,
};
use crate::linework::OverlapMask;

/// A slope stored as a unit direction, so vertical lines need no special value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slope {
    pub dx: f64,
    pub dy: f64,
}

impl Slope {
    /// Canonical direction: `dx > 0`, or `dx == 0` and `dy > 0`.
    pub fn from_direction(dx: f64, dy: f64) -> Self {
        let n = dx.hypot(dy);
        let (mut dx, mut dy) = (dx / n, dy / n);
        if dx < 0.0 || (dx == 0.0 && dy < 0.0) {
            dx = -dx;
            dy = -dy;
        }
        if dx.abs() < 1e-15 {
            dx = 0.0;
            dy = 1.0;
        }
        Slope { dx, dy }
    }

    pub fn from_value(k: f64) -> Self {
        Slope::from_direction(1.0, k)
    }

    pub fn vertical() -> Self {
        Slope { dx: 0.0, dy: 1.0 }
    }

    pub fn is_vertical(&self) -> bool {
        self.dx == 0.0
    }

    /// `dy / dx`, or `None` for vertical.
    pub fn value(&self) -> Option<f64> {
        if self.is_vertical() {
            None
        } else {
            Some(self.dy / self.dx)
        }
    }

    pub fn direction(&self) -> Point2 {
        Point2::new(self.dx, self.dy)
    }

    /// The orthogonal slope (`k * k_perp = -1`).
    pub fn orthogonal(&self) -> Slope {
        Slope::from_direction(-self.dy, self.dx)
    }

    /// Sine of the angle between two slopes; zero when parallel.
    pub fn cross(&self, o: &Slope) -> f64 {
        self.dx * o.dy - self.dy * o.dx
    }
}

/// Slope in the reference image of the image of a line with slope `k` through `p`.
pub fn slope_transfer(h: &Homography, p: Point2, k: Slope) -> Result<Slope> {
    let (fx, fy, gx, gy) = h.jacobian(p)?;
    let dx = fx * k.dx + fy * k.dy;
    let dy = gx * k.dx + gy * k.dy;
    if dx.hypot(dy) == 0.0 {
        return Err(Error::SingularHomography);
    }
    Ok(Slope::from_direction(dx, dy))
}

/// The slope family kept parallel by `h` (`k1`) and its image slope (`s1`).
pub fn invariant_slopes(h: &Homography) -> Result<(Slope, Slope)> {
    let [h1, h2, _, h4, h5, _, h7, h8] = h.h;
    if h7 == 0.0 && h8 == 0.0 {
        return Err(Error::AffineWarp);
    }
    // Direction (h8, -h7) keeps the denominator constant along the line.
    let k1 = Slope::from_direction(h8, -h7);
    let s1 = Slope::from_direction(h1 * h8 - h2 * h7, h4 * h8 - h5 * h7);
    Ok((k1, s1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossLineFrame {
    /// Invariant slope in the target (direction of `l_v`).
    pub k1: Slope,
    /// Orthogonal slope (direction of `l_u`).
    pub k2: Slope,
    pub s1: Slope,
    pub s2: Slope,
    pub anchor: Point2,
    pub l_u: LineEq,
    pub l_v: LineEq,
    /// Unit normal of `l_v` pointing into the non-overlapping side.
    pub outward: Point2,
}

/// Where along `l_v` the cross-lines meet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AnchorRule {
    /// Midpoint of `l_v` clipped to the target rectangle.
    #[default]
    Midpoint,
    /// The point of `l_v` where the image of `l_u` stays orthogonal to the image
    /// of `l_v`; falls back to the midpoint if no such point exists.
    Orthogonal,
}

/// Overlap geometry in the target image: the convex hull of the overlapping
/// part and the centroid of the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapRegion {
    pub hull: Vec<Point2>,
    pub non_overlap_centroid: Point2,
    pub non_overlap_area: f64,
}

impl OverlapRegion {
    /// From a polygon contained in `rect`.
    pub fn from_polygon(rect: &Rect, polygon: &[Point2]) -> Result<Self> {
        let hull = convex_hull(polygon);
        if hull.len() < 3 {
            return Err(Error::EmptyOverlap);
        }
        let area = polygon_area(&hull).abs();
        let rect_area = rect.width * rect.height;
        let rest = rect_area - area;
        if rest <= 1e-9 * rect_area {
            return Err(Error::NoNonOverlap);
        }
        let c = polygon_centroid(&hull);
        let centroid = (rect_area / rest) * rect.center() - (area / rest) * c;
        Ok(OverlapRegion {
            hull,
            non_overlap_centroid: centroid,
            non_overlap_area: rest,
        })
    }

    /// From a raster mask where set pixels form the non-overlapping region.
    pub fn from_mask(mask: &OverlapMask) -> Result<Self> {
        let mut overlap = Vec::new();
        let mut sum = Point2::default();
        let mut count = 0usize;
        for y in 0..mask.height {
            for x in 0..mask.width {
                let p = Point2::new(x as f64, y as f64);
                if mask.get(x, y) {
                    sum = sum + p;
                    count += 1;
                } else {
                    overlap.push(p);
                }
            }
        }
        if count == 0 {
            return Err(Error::NoNonOverlap);
        }
        let hull = convex_hull(&overlap);
        if hull.is_empty() {
            return Err(Error::EmptyOverlap);
        }
        Ok(OverlapRegion {
            hull,
            non_overlap_centroid: sum / count as f64,
            non_overlap_area: count as f64,
        })
    }
}

pub fn select_frame(
    h: &Homography,
    rect: &Rect,
    overlap: &OverlapRegion,
) -> Result<CrossLineFrame> {
    select_frame_with(h, rect, overlap, AnchorRule::Midpoint)
}

/// Chooses `l_v` (slope `k1`) tangent to the overlap hull on the side facing the
/// non-overlapping region, and `l_u` (slope `k2`) through the anchor.
pub fn select_frame_with(
    h: &Homography,
    rect: &Rect,
    overlap: &OverlapRegion,
    rule: AnchorRule,
) -> Result<CrossLineFrame> {
    let (k1, s1) = invariant_slopes(h)?;
    if overlap.non_overlap_area <= 0.0 {
        return Err(Error::NoNonOverlap);
    }
    if overlap.hull.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    let normal = k1.direction().perp();
    let hull_mean =
        overlap.hull.iter().fold(Point2::default(), |a, &p| a + p) / overlap.hull.len() as f64;
    let side = normal.dot(overlap.non_overlap_centroid - hull_mean);
    let outward = if side < 0.0 { -normal } else { normal };
    let offset = overlap
        .hull
        .iter()
        .map(|&p| outward.dot(p))
        .fold(f64::NEG_INFINITY, f64::max);
    let l_v = LineEq::new(outward.x, outward.y, -offset)?;
    let (a, b) = l_v
        .clip(rect)
        .ok_or_else(|| Error::DegenerateConfiguration("partition line misses the target".into()))?;
    let midpoint = a.lerp(b, 0.5);
    let k2 = k1.orthogonal();
    let anchor = match rule {
        AnchorRule::Midpoint => midpoint,
        AnchorRule::Orthogonal => orthogonal_anchor(h, midpoint, k1, k2, s1).unwrap_or(midpoint),
    };
    let l_u = LineEq::with_direction(anchor, k2.direction())?;
    Ok(CrossLineFrame {
        k1,
        k2,
        s1,
        s2: s1.orthogonal(),
        anchor,
        l_u,
        l_v,
        outward,
    })
}

/// Along a line of slope `k1` the image of the orthogonal direction turns
/// linearly, so the orthogonality defect is affine in the line parameter.
fn orthogonal_anchor(
    h: &Homography,
    base: Point2,
    k1: Slope,
    k2: Slope,
    s1: Slope,
) -> Option<Point2> {
    let e1 = s1.direction();
    let defect = |t: f64| -> Option<f64> {
        let p = base + t * k1.direction();
        let (fx, fy, gx, gy) = h.jacobian(p).ok()?;
        let d = Point2::new(fx * k2.dx + fy * k2.dy, gx * k2.dx + gy * k2.dy);
        Some(d.dot(e1) * h.denominator(p))
    };
    let scale = 100.0;
    let f0 = defect(0.0)?;
    let f1 = defect(scale)?;
    let slope = (f1 - f0) / scale;
    if slope.abs() < 1e-300 {
        return None;
    }
    let t = -f0 / slope;
    let p = base + t * k1.direction();
    p.is_finite().then_some(p)
}

/// First-order expansion of a homography at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorWarp {
    pub at: Point2,
    pub value: Point2,
    /// `(f_x, f_y, g_x, g_y)`.
    pub gradient: (f64, f64, f64, f64),
}

impl TaylorWarp {
    pub fn new(h: &Homography, at: Point2) -> Result<Self> {
        Ok(TaylorWarp {
            at,
            value: h.apply(at)?,
            gradient: h.jacobian(at)?,
        })
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let d = p - self.at;
        let (fx, fy, gx, gy) = self.gradient;
        Point2::new(
            self.value.x + fx * d.x + fy * d.y,
            self.value.y + gx * d.x + gy * d.y,
        )
    }
}

/// A homography with its cross-line frame; maps target points to the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuasiHomography {
    pub h: Homography,
    pub frame: CrossLineFrame,
    pub taylor: TaylorWarp,
}

/// The two reference-frame lines whose intersection is the warped point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintLines {
    /// Image of the projection onto `l_u` under the exact homography.
    pub base_u: Point2,
    /// Image of the projection onto `l_v` under the linearized homography.
    pub base_v: Point2,
    pub dir_u: Point2,
    pub dir_v: Point2,
}

impl ConstraintLines {
    /// Signed residuals of `q` against both lines (cross-product form).
    pub fn residuals(&self, q: Point2) -> (f64, f64) {
        (
            (q - self.base_u).cross(self.dir_u),
            (q - self.base_v).cross(self.dir_v),
        )
    }
}

impl QuasiHomography {
    pub fn new(h: Homography, frame: CrossLineFrame) -> Result<Self> {
        Ok(QuasiHomography {
            h,
            frame,
            taylor: TaylorWarp::new(&h, frame.anchor)?,
        })
    }

    pub fn constraint_lines(&self, p: Point2) -> Result<ConstraintLines> {
        let on_u = self.frame.l_u.project(p);
        let on_v = self.frame.l_v.project(p);
        Ok(ConstraintLines {
            base_u: self.h.apply(on_u)?,
            base_v: self.taylor.apply(on_v),
            dir_u: self.frame.s1.direction(),
            dir_v: self.frame.s2.direction(),
        })
    }

    pub fn apply(&self, p: Point2) -> Result<Point2> {
        let lines = self.constraint_lines(p)?;
        let det = lines.dir_u.cross(lines.dir_v);
        if det.abs() < 1e-12 {
            return Err(Error::ParallelConstraintLines);
        }
        // base_u + t dir_u = base_v + s dir_v
        let t = (lines.base_v - lines.base_u).cross(lines.dir_v) / det;
        Ok(lines.base_u + t * lines.dir_u)
    }
}

pub fn qh_warp(h: &Homography, frame: &CrossLineFrame, p: Point2) -> Result<Point2> {
    QuasiHomography::new(*h, *frame)?.apply(p)
}

/// Moving-DLT field followed by the inverse global homography and the
/// quasi-homography built from that same homography.
#[derive(Debug, Clone)]
pub struct CompositeWarp {
    pub field: LocalWarpField,
    pub qh: QuasiHomography,
    h_inv: Homography,
}

impl CompositeWarp {
    pub fn new(field: LocalWarpField, h: Homography, frame: CrossLineFrame) -> Result<Self> {
        Ok(CompositeWarp {
            field,
            qh: QuasiHomography::new(h, frame)?,
            h_inv: h.invert()?,
        })
    }

    pub fn apply(&self, p: Point2) -> Result<Point2> {
        let q = self.field.eval(p)?;
        let back = self.h_inv.apply(q)?;
        self.qh.apply(back)
    }
}

pub fn composite_warp(
    field: &LocalWarpField,
    h: &Homography,
    frame: &CrossLineFrame,
    p: Point2,
) -> Result<Point2> {
    let q = field.eval(p)?;
    let back = h.invert()?.apply(q)?;
    qh_warp(h, frame, back)
}
