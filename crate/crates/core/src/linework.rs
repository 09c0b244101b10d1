//! Line features: segment detection and matching, cross-line families with
//! uniform sampling, salient-line sampling and the non-overlap mask.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Homography, LineEq, LinePair, LineSegment, Point2, Rect};
use crate::quasihomography::{CrossLineFrame, Slope};
use crate::raster::GrayImage;

/// Raster over the target image; set pixels belong to the preimage of the
/// non-overlapping region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl OverlapMask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Membership of the nearest pixel.
    pub fn contains_point(&self, p: Point2) -> bool {
        if !p.is_finite() {
            return false;
        }
        let x = p.x.round().clamp(0.0, (self.width - 1) as f64) as usize;
        let y = p.y.round().clamp(0.0, (self.height - 1) as f64) as usize;
        self.get(x, y)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Pixels of the target whose image under every `(homography, footprint)`
    /// falls outside that footprint.
    pub fn from_footprints(
        width: usize,
        height: usize,
        footprints: &[(Homography, Rect)],
    ) -> Result<Self> {
        for (h, _) in footprints {
            h.invert()?;
        }
        let mut bits = vec![true; width * height];
        for y in 0..height {
            for x in 0..width {
                let p = Point2::new(x as f64, y as f64);
                let covered = footprints
                    .iter()
                    .any(|(h, r)| h.apply(p).map(|q| r.contains(q)).unwrap_or(false));
                bits[y * width + x] = !covered;
            }
        }
        Ok(OverlapMask {
            width,
            height,
            bits,
        })
    }
}

/// Ω for a two-image pair: target pixels mapped by `h` outside `ref_rect`.
pub fn compute_omega(
    h: &Homography,
    target: (usize, usize),
    ref_rect: &Rect,
) -> Result<OverlapMask> {
    OverlapMask::from_footprints(target.0, target.1, &[(*h, *ref_rect)])
}

/// One uniformly sampled cross-line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossLine {
    pub line: LineEq,
    pub samples: Vec<Point2>,
    pub in_omega: Vec<bool>,
    /// Unit normal of the line's image under the homography prior.
    pub normal: Point2,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CrossLineSamples {
    /// Parallel to `l_u` (slope `k2`).
    pub u_lines: Vec<CrossLine>,
    /// Parallel to `l_v` (slope `k1`).
    pub v_lines: Vec<CrossLine>,
}

impl CrossLineSamples {
    pub fn sample_count(&self) -> usize {
        self.u_lines
            .iter()
            .chain(self.v_lines.iter())
            .map(|l| l.samples.len())
            .sum()
    }
}

fn line_family(
    dir: Slope,
    rect: &Rect,
    spacing: f64,
    omega: Option<&OverlapMask>,
    prior: &Homography,
) -> Result<Vec<CrossLine>> {
    let d = dir.direction();
    let n = d.perp();
    let offsets: Vec<f64> = rect.corners().iter().map(|c| n.dot(*c)).collect();
    let lo = offsets.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = offsets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let count = ((hi - lo) / spacing + 1e-9).floor() as usize + 1;
    let mut lines = Vec::with_capacity(count);
    for i in 0..count {
        let o = lo + i as f64 * spacing;
        let line = LineEq {
            a: n.x,
            b: n.y,
            c: -o,
        };
        let Some((a, b)) = line.clip(rect) else {
            continue;
        };
        let (start, end) = if (b - a).dot(d) >= 0.0 {
            (a, b)
        } else {
            (b, a)
        };
        let len = start.dist(end);
        let k_max = (len / spacing + 1e-9).floor() as usize;
        let samples: Vec<Point2> = (0..=k_max)
            .map(|k| start + (k as f64 * spacing) * d)
            .collect();
        let in_omega = samples
            .iter()
            .map(|&p| omega.is_some_and(|m| m.contains_point(p)))
            .collect();
        let normal = prior.transfer_line(&line)?.normal();
        lines.push(CrossLine {
            line,
            samples,
            in_omega,
            normal,
        });
    }
    Ok(lines)
}

/// Two families of parallels (to `l_u` and `l_v`) covering `rect`, spaced and
/// sampled every `spacing` pixels.
pub fn generate_cross_lines(
    frame: &CrossLineFrame,
    rect: &Rect,
    omega: Option<&OverlapMask>,
    spacing: f64,
    prior: &Homography,
) -> Result<CrossLineSamples> {
    if !(spacing > 0.0) {
        return Err(Error::InvalidInput("spacing must be positive".into()));
    }
    Ok(CrossLineSamples {
        u_lines: line_family(frame.k2, rect, spacing, omega, prior)?,
        v_lines: line_family(frame.k1, rect, spacing, omega, prior)?,
    })
}

/// A salient segment, its equidistant samples and the normal of its image
/// under the homography prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalientLine {
    pub segment: LineSegment,
    pub samples: Vec<Point2>,
    pub normal: Point2,
}

pub fn sample_salient(
    segments: &[LineSegment],
    spacing: f64,
    min_length: f64,
    prior: &Homography,
) -> Result<Vec<SalientLine>> {
    let mut out = Vec::new();
    for seg in segments {
        if seg.length() < min_length {
            continue;
        }
        let normal = prior.transfer_line(&seg.line()?)?.normal();
        out.push(SalientLine {
            segment: *seg,
            samples: seg.sample_spaced(spacing),
            normal,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    /// Gradient magnitude percentile used as the threshold.
    pub percentile: f64,
    /// Absolute magnitude floor in gray levels per pixel.
    pub min_magnitude: f32,
    pub angle_tolerance_deg: f64,
    pub min_length: f64,
    pub max_width: f64,
    /// Gaussian smoothing applied before measuring orientation; 0 disables it.
    pub blur_sigma: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            percentile: 0.8,
            min_magnitude: 1.0,
            angle_tolerance_deg: 22.5,
            min_length: 20.0,
            max_width: 3.0,
            blur_sigma: 1.0,
        }
    }
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let mut d = (a - b).abs() % std::f64::consts::TAU;
    if d > std::f64::consts::PI {
        d = std::f64::consts::TAU - d;
    }
    d
}

/// Region-growing segment detector. Output is ordered by seed position (row
/// major), so repeated runs agree exactly.
pub fn detect_segments(image: &GrayImage, cfg: &SegmentConfig) -> Vec<LineSegment> {
    let (w, h) = (image.width, image.height);
    if w == 0 || h == 0 {
        return Vec::new();
    }
    // Support comes from the raw gradient; orientation from the smoothed one,
    // which is stable along aliased staircase edges.
    let (gx, gy) = image.sobel();
    let (ox, oy) = if cfg.blur_sigma > 0.0 {
        image.gaussian_blur(cfg.blur_sigma).sobel()
    } else {
        (gx.clone(), gy.clone())
    };
    let mag: Vec<f32> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let mut sorted = mag.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let idx = ((sorted.len() - 1) as f64 * cfg.percentile).round() as usize;
    let threshold = sorted[idx].max(cfg.min_magnitude);
    let angle: Vec<f64> = ox
        .iter()
        .zip(&oy)
        .map(|(a, b)| (*b as f64).atan2(*a as f64))
        .collect();

    let mut seeds: Vec<usize> = (0..w * h).filter(|&i| mag[i] > threshold).collect();
    seeds.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]).then(a.cmp(&b)));
    let tol = cfg.angle_tolerance_deg.to_radians();
    let mut used = vec![false; w * h];
    let mut found: Vec<(usize, LineSegment)> = Vec::new();
    let mut queue = VecDeque::new();

    for &seed in &seeds {
        if used[seed] {
            continue;
        }
        used[seed] = true;
        let mut region = vec![seed];
        let (mut sc, mut ss) = (angle[seed].cos(), angle[seed].sin());
        queue.clear();
        queue.push_back(seed);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            let region_angle = ss.atan2(sc);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nx, ny) = (x + dx, y + dy);
                    if (dx == 0 && dy == 0)
                        || nx < 0
                        || ny < 0
                        || nx >= w as isize
                        || ny >= h as isize
                    {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if used[j] || mag[j] <= threshold || angle_diff(angle[j], region_angle) > tol {
                        continue;
                    }
                    used[j] = true;
                    sc += angle[j].cos();
                    ss += angle[j].sin();
                    region.push(j);
                    queue.push_back(j);
                }
            }
        }
        if (region.len() as f64) < cfg.min_length {
            continue;
        }
        if let Some(seg) = fit_region(&region, w, cfg) {
            found.push((seed, seg));
        }
    }
    found.sort_by_key(|(seed, _)| *seed);
    found.into_iter().map(|(_, s)| s).collect()
}

/// Principal-axis fit; `None` when too short or too wide.
fn fit_region(region: &[usize], w: usize, cfg: &SegmentConfig) -> Option<LineSegment> {
    let n = region.len() as f64;
    let pts: Vec<Point2> = region
        .iter()
        .map(|&i| Point2::new((i % w) as f64, (i / w) as f64))
        .collect();
    let c = pts.iter().fold(Point2::default(), |a, &p| a + p) / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in &pts {
        let d = *p - c;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let axis = Point2::new(theta.cos(), theta.sin());
    let perp = axis.perp();
    let (mut t0, mut t1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut q0, mut q1) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        let d = *p - c;
        let t = d.dot(axis);
        let q = d.dot(perp);
        t0 = t0.min(t);
        t1 = t1.max(t);
        q0 = q0.min(q);
        q1 = q1.max(q);
    }
    if t1 - t0 < cfg.min_length || q1 - q0 > cfg.max_width {
        return None;
    }
    LineSegment::new(c + t0 * axis, c + t1 * axis).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub max_distance: f64,
    pub max_angle_deg: f64,
    pub min_overlap: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            max_distance: 3.0,
            max_angle_deg: 5.0,
            min_overlap: 0.5,
        }
    }
}

/// A matched segment pair by index, with the resulting line correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentMatch {
    pub target: usize,
    pub reference: usize,
    pub pair: LinePair,
}

pub fn match_segments(
    targets: &[LineSegment],
    references: &[LineSegment],
    prior: &Homography,
) -> Vec<LinePair> {
    match_segments_indexed(targets, references, prior, &MatchConfig::default())
        .into_iter()
        .map(|m| m.pair)
        .collect()
}

/// Each target segment, mapped by `prior`, is paired with the reference segment
/// of smallest mean endpoint-to-line distance among those passing the angle and
/// overlap gates.
pub fn match_segments_indexed(
    targets: &[LineSegment],
    references: &[LineSegment],
    prior: &Homography,
    cfg: &MatchConfig,
) -> Vec<SegmentMatch> {
    let mut out = Vec::new();
    let max_angle = cfg.max_angle_deg.to_radians();
    for (ti, t) in targets.iter().enumerate() {
        let (Ok(a), Ok(b)) = (prior.apply(t.start), prior.apply(t.end)) else {
            continue;
        };
        let Ok(mapped) = LineSegment::new(a, b) else {
            continue;
        };
        let mut best: Option<(f64, usize, LineEq)> = None;
        for (ri, r) in references.iter().enumerate() {
            let Ok(line) = r.line() else { continue };
            let cos = mapped.direction().dot(r.direction()).abs().min(1.0);
            if cos.acos() > max_angle {
                continue;
            }
            let dist = 0.5 * (line.signed_distance(a).abs() + line.signed_distance(b).abs());
            if dist >= cfg.max_distance {
                continue;
            }
            let dir = r.direction();
            let (ra, rb) = (0.0f64, r.length());
            let (ma, mb) = {
                let x = (a - r.start).dot(dir);
                let y = (b - r.start).dot(dir);
                (x.min(y), x.max(y))
            };
            let overlap = (rb.min(mb) - ra.max(ma)).max(0.0);
            let ratio = overlap / mapped.length().min(r.length());
            if ratio <= cfg.min_overlap {
                continue;
            }
            if best.is_none_or(|(d, _, _)| dist < d) {
                best = Some((dist, ri, line));
            }
        }
        if let Some((_, ri, line)) = best {
            out.push(SegmentMatch {
                target: ti,
                reference: ri,
                pair: LinePair { seg: *t, line },
            });
        }
    }
    out
}
