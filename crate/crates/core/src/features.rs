//! Corner features, patch matching, robust homography fitting and the
//! correspondence file format.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{estimate_dlt, Homography, LinePair, LineSegment, Point2, PointPair};
use crate::raster::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerConfig {
    pub max_corners: usize,
    pub nms_radius: usize,
    /// Harris sensitivity `k` in `det − k tr²`.
    pub k: f64,
    /// Gaussian window of the structure tensor.
    pub window_sigma: f64,
    /// Responses below this fraction of the strongest are dropped.
    pub relative_threshold: f64,
}

impl Default for CornerConfig {
    fn default() -> Self {
        CornerConfig {
            max_corners: 500,
            nms_radius: 5,
            k: 0.04,
            window_sigma: 1.0,
            relative_threshold: 0.01,
        }
    }
}

fn harris_response(img: &GrayImage, cfg: &CornerConfig) -> Vec<f64> {
    let (gx, gy) = img.sobel();
    let field = |f: &dyn Fn(f32, f32) -> f32| GrayImage {
        width: img.width,
        height: img.height,
        data: gx.iter().zip(&gy).map(|(&a, &b)| f(a, b)).collect(),
    };
    let sxx = field(&|a, _| a * a).gaussian_blur(cfg.window_sigma);
    let syy = field(&|_, b| b * b).gaussian_blur(cfg.window_sigma);
    let sxy = field(&|a, b| a * b).gaussian_blur(cfg.window_sigma);
    (0..img.data.len())
        .map(|i| {
            let (a, b, c) = (sxx.data[i] as f64, syy.data[i] as f64, sxy.data[i] as f64);
            a * b - c * c - cfg.k * (a + b) * (a + b)
        })
        .collect()
}

/// Harris maxima after non-maximum suppression, strongest first, refined to
/// sub-pixel accuracy by per-axis parabola fits.
pub fn detect_corners(img: &GrayImage, cfg: &CornerConfig) -> Vec<Point2> {
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return Vec::new();
    }
    let r = harris_response(img, cfg);
    let max = r.iter().copied().fold(0.0f64, f64::max);
    if !(max > 1e-9) {
        return Vec::new();
    }
    let thresh = cfg.relative_threshold * max;
    let rad = cfg.nms_radius as isize;
    let mut cands: Vec<usize> = (0..w * h)
        .filter(|&i| {
            let v = r[i];
            if v <= thresh {
                return false;
            }
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -rad..=rad {
                for dx in -rad..=rad {
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
                    // Ties go to the lower index.
                    if r[j] > v || (r[j] == v && j < i) {
                        return false;
                    }
                }
            }
            true
        })
        .collect();
    cands.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
    cands.truncate(cfg.max_corners);
    cands
        .into_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let peak = |m: f64, c: f64, p: f64| {
                let d = m - 2.0 * c + p;
                if d < 0.0 {
                    (0.5 * (m - p) / d).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            };
            let ox = if x > 0 && x + 1 < w {
                peak(r[i - 1], r[i], r[i + 1])
            } else {
                0.0
            };
            let oy = if y > 0 && y + 1 < h {
                peak(r[i - w], r[i], r[i + w])
            } else {
                0.0
            };
            Point2::new(x as f64 + ox, y as f64 + oy)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerMatchConfig {
    /// Odd patch side.
    pub patch: usize,
    pub min_score: f64,
}

impl Default for CornerMatchConfig {
    fn default() -> Self {
        CornerMatchConfig {
            patch: 11,
            min_score: 0.8,
        }
    }
}

/// Zero-mean, unit-norm patch around the rounded corner; `None` near borders
/// or on flat patches.
fn patch_vector(img: &GrayImage, p: Point2, side: usize) -> Option<Vec<f64>> {
    let half = (side / 2) as isize;
    let (cx, cy) = (p.x.round() as isize, p.y.round() as isize);
    if cx - half < 0
        || cy - half < 0
        || cx + half >= img.width as isize
        || cy + half >= img.height as isize
    {
        return None;
    }
    let mut v = Vec::with_capacity(side * side);
    for dy in -half..=half {
        for dx in -half..=half {
            v.push(img.get((cx + dx) as usize, (cy + dy) as usize) as f64);
        }
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-6 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

/// Mutual-best normalized cross-correlation matches above `min_score`.
pub fn match_corners(
    img_a: &GrayImage,
    corners_a: &[Point2],
    img_b: &GrayImage,
    corners_b: &[Point2],
    cfg: &CornerMatchConfig,
) -> Vec<PointPair> {
    let pa: Vec<Option<Vec<f64>>> = corners_a
        .iter()
        .map(|&p| patch_vector(img_a, p, cfg.patch))
        .collect();
    let pb: Vec<Option<Vec<f64>>> = corners_b
        .iter()
        .map(|&p| patch_vector(img_b, p, cfg.patch))
        .collect();
    let ncc = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let best = |from: &[Option<Vec<f64>>], to: &[Option<Vec<f64>>]| -> Vec<Option<(usize, f64)>> {
        from.par_iter()
            .map(|a| {
                let a = a.as_ref()?;
                let mut out: Option<(usize, f64)> = None;
                for (j, b) in to.iter().enumerate() {
                    if let Some(b) = b {
                        let s = ncc(a, b);
                        if out.is_none_or(|(_, bs)| s > bs) {
                            out = Some((j, s));
                        }
                    }
                }
                out
            })
            .collect()
    };
    let ab = best(&pa, &pb);
    let ba = best(&pb, &pa);
    ab.iter()
        .enumerate()
        .filter_map(|(i, m)| {
            let (j, s) = (*m)?;
            (s >= cfg.min_score && ba[j].is_some_and(|(k, _)| k == i))
                .then(|| PointPair::new(corners_a[i], corners_b[j]))
        })
        .collect()
}

/// `‖H p − p′‖² + ‖H⁻¹ p′ − p‖²`; infinite when either mapping fails.
pub fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, pair: &PointPair) -> f64 {
    match (h.apply(pair.p), h_inv.apply(pair.p_prime)) {
        (Ok(a), Ok(b)) => (a - pair.p_prime).norm_sq() + (b - pair.p).norm_sq(),
        _ => f64::INFINITY,
    }
}

fn inliers_of(h: &Homography, pairs: &[PointPair], threshold: f64) -> Option<(Vec<usize>, f64)> {
    let inv = h.invert().ok()?;
    let t2 = threshold * threshold;
    let mut idx = Vec::new();
    let mut err = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        let e = symmetric_transfer_error(h, &inv, p);
        if e < t2 {
            idx.push(i);
            err += e;
        }
    }
    Some((idx, err))
}

fn mean_error(h: &Homography, pairs: &[PointPair], idx: &[usize]) -> f64 {
    let Ok(inv) = h.invert() else {
        return f64::INFINITY;
    };
    idx.iter()
        .map(|&i| symmetric_transfer_error(h, &inv, &pairs[i]))
        .sum::<f64>()
        / idx.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub h: Homography,
    /// Indices into the input, ascending.
    pub inliers: Vec<usize>,
}

/// Seeded RANSAC over 4-point DLT models with a symmetric transfer error
/// threshold in pixels. The best model (most inliers, then lower error, then
/// earlier iteration) is refit on its inliers.
pub fn ransac_homography(
    pairs: &[PointPair],
    threshold: f64,
    iterations: usize,
    seed: u64,
) -> Result<RansacResult> {
    if pairs.len() < 4 {
        return Err(Error::InsufficientInliers(pairs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Vec<usize>> = (0..iterations.max(1))
        .map(|_| sample(&mut rng, pairs.len(), 4).into_vec())
        .collect();
    let best = samples
        .par_iter()
        .enumerate()
        .filter_map(|(it, s)| {
            let pts: Vec<PointPair> = s.iter().map(|&i| pairs[i]).collect();
            let h = estimate_dlt(&pts, &[]).ok()?;
            let (idx, err) = inliers_of(&h, pairs, threshold)?;
            Some((idx.len(), err, it, h, idx))
        })
        .reduce_with(|a, b| {
            let a_wins = a.0 > b.0 || (a.0 == b.0 && (a.1 < b.1 || (a.1 == b.1 && a.2 < b.2)));
            if a_wins {
                a
            } else {
                b
            }
        });
    let Some((count, _, _, minimal, idx)) = best else {
        return Err(Error::InsufficientInliers(0));
    };
    if count < 4 {
        return Err(Error::InsufficientInliers(count));
    }
    let inlier_pairs: Vec<PointPair> = idx.iter().map(|&i| pairs[i]).collect();
    let mut h = minimal;
    if let Ok(refit) = estimate_dlt(&inlier_pairs, &[]) {
        if mean_error(&refit, pairs, &idx) <= mean_error(&minimal, pairs, &idx) {
            h = refit;
        }
    }
    let (inliers, _) = inliers_of(&h, pairs, threshold).ok_or(Error::SingularHomography)?;
    if inliers.len() < 4 {
        return Err(Error::InsufficientInliers(inliers.len()));
    }
    Ok(RansacResult { h, inliers })
}

/// A labelled point match between the target (`a`) and the reference (`b`).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCorr {
    pub id: String,
    pub a: Point2,
    pub b: Point2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineCorr {
    pub id: String,
    pub a: LineSegment,
    pub b: LineSegment,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub points: Vec<PointCorr>,
    pub lines: Vec<LineCorr>,
}

type Xy = [f64; 2];

fn xy(p: Point2) -> Xy {
    [p.x, p.y]
}

fn pt(v: Xy) -> Point2 {
    Point2::new(v[0], v[1])
}

fn seg(v: [Xy; 2]) -> Result<LineSegment> {
    LineSegment::new(pt(v[0]), pt(v[1]))
}

#[derive(Serialize, Deserialize)]
struct PointRecord {
    id: String,
    a: Xy,
    b: Xy,
}

#[derive(Serialize, Deserialize)]
struct LineRecord {
    id: String,
    a: [Xy; 2],
    b: [Xy; 2],
}

#[derive(Serialize, Deserialize, Default)]
struct PairFile {
    #[serde(default)]
    points: Vec<PointRecord>,
    #[serde(default)]
    lines: Vec<LineRecord>,
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a String>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::InvalidInput(format!(
                "duplicate correspondence id {id:?}"
            )));
        }
    }
    Ok(())
}

impl CorrespondenceSet {
    pub fn from_pairs(points: &[PointPair], lines: &[(LineSegment, LineSegment)]) -> Self {
        CorrespondenceSet {
            points: points
                .iter()
                .enumerate()
                .map(|(i, p)| PointCorr {
                    id: format!("p{i}"),
                    a: p.p,
                    b: p.p_prime,
                })
                .collect(),
            lines: lines
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| LineCorr {
                    id: format!("l{i}"),
                    a,
                    b,
                })
                .collect(),
        }
    }

    pub fn point_pairs(&self) -> Vec<PointPair> {
        self.points
            .iter()
            .map(|c| PointPair::new(c.a, c.b))
            .collect()
    }

    /// Reference segments become line equations.
    pub fn line_pairs(&self) -> Result<Vec<LinePair>> {
        self.lines
            .iter()
            .map(|c| {
                Ok(LinePair {
                    seg: c.a,
                    line: c.b.line()?,
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        check_unique(self.points.iter().map(|p| &p.id))?;
        check_unique(self.lines.iter().map(|l| &l.id))
    }

    pub fn to_json(&self) -> Result<String> {
        let f = PairFile {
            points: self
                .points
                .iter()
                .map(|c| PointRecord {
                    id: c.id.clone(),
                    a: xy(c.a),
                    b: xy(c.b),
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|c| LineRecord {
                    id: c.id.clone(),
                    a: [xy(c.a.start), xy(c.a.end)],
                    b: [xy(c.b.start), xy(c.b.end)],
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: PairFile = serde_json::from_str(s)?;
        let set = CorrespondenceSet {
            points: f
                .points
                .into_iter()
                .map(|r| PointCorr {
                    id: r.id,
                    a: pt(r.a),
                    b: pt(r.b),
                })
                .collect(),
            lines: f
                .lines
                .into_iter()
                .map(|r| {
                    Ok(LineCorr {
                        id: r.id,
                        a: seg(r.a)?,
                        b: seg(r.b)?,
                    })
                })
                .collect::<Result<_>>()?,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// A physical feature observed in several images, keyed by image index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiPoint {
    pub id: String,
    pub obs: BTreeMap<usize, Xy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiLine {
    pub id: String,
    pub obs: BTreeMap<usize, [Xy; 2]>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MultiCorrespondenceSet {
    #[serde(default)]
    pub points: Vec<MultiPoint>,
    #[serde(default)]
    pub lines: Vec<MultiLine>,
}

impl MultiCorrespondenceSet {
    pub fn validate(&self, images: usize) -> Result<()> {
        check_unique(self.points.iter().map(|p| &p.id))?;
        check_unique(self.lines.iter().map(|l| &l.id))?;
        let keys = self
            .points
            .iter()
            .flat_map(|p| p.obs.keys())
            .chain(self.lines.iter().flat_map(|l| l.obs.keys()));
        for &k in keys {
            if k >= images {
                return Err(Error::InvalidInput(format!(
                    "observation for image {k} of {images}"
                )));
            }
        }
        for l in &self.lines {
            for s in l.obs.values() {
                seg(*s)?;
            }
        }
        Ok(())
    }

    pub fn point_obs(&self, i: usize) -> impl Iterator<Item = (usize, Point2)> + '_ {
        self.points[i].obs.iter().map(|(&k, &v)| (k, pt(v)))
    }

    pub fn line_obs(&self, j: usize) -> impl Iterator<Item = (usize, LineSegment)> + '_ {
        self.lines[j]
            .obs
            .iter()
            .map(|(&k, &v)| (k, seg(v).expect("validated segment")))
    }

    /// Pairwise correspondences between images `a` (target side) and `b`.
    pub fn pair(&self, a: usize, b: usize) -> CorrespondenceSet {
        let points = self
            .points
            .iter()
            .filter_map(|p| {
                Some(PointCorr {
                    id: p.id.clone(),
                    a: pt(*p.obs.get(&a)?),
                    b: pt(*p.obs.get(&b)?),
                })
            })
            .collect();
        let lines = self
            .lines
            .iter()
            .filter_map(|l| {
                Some(LineCorr {
                    id: l.id.clone(),
                    a: seg(*l.obs.get(&a)?).ok()?,
                    b: seg(*l.obs.get(&b)?).ok()?,
                })
            })
            .collect();
        CorrespondenceSet { points, lines }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str, images: usize) -> Result<Self> {
        let m: MultiCorrespondenceSet = serde_json::from_str(s)?;
        m.validate(images)?;
        Ok(m)
    }

    pub fn load(path: &Path, images: usize) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, images)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
