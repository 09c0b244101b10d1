//! Canvas layout, inverse bilinear texture mapping of deformed meshes and
//! feathered blending.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Rect};
use crate::meshwarp::MeshGrid;
use crate::raster::RasterImage;

/// Canvas pixel `(i, j)` sits at `origin + (i, j)` in reference coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub origin: Point2,
    pub width: usize,
    pub height: usize,
}

impl Canvas {
    pub fn rect(&self) -> Rect {
        Rect::new(
            self.origin.x,
            self.origin.y,
            self.width as f64,
            self.height as f64,
        )
    }

    pub fn to_canvas(&self, p: Point2) -> Point2 {
        p - self.origin
    }

    pub fn from_canvas(&self, x: usize, y: usize) -> Point2 {
        Point2::new(self.origin.x + x as f64, self.origin.y + y as f64)
    }
}

/// Bounding box of the reference rect and every deformed vertex, snapped
/// outward to whole pixels; overshoots below `CANVAS_SNAP` are rounded away.
/// Non-finite vertices are ignored.
pub fn compute_canvas(reference: &Rect, meshes: &[&[f64]]) -> Result<Canvas> {
    let (mut x0, mut y0, mut x1, mut y1) =
        (reference.x, reference.y, reference.x1(), reference.y1());
    for v in meshes {
        for p in v
            .chunks_exact(2)
            .filter(|p| p[0].is_finite() && p[1].is_finite())
        {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
    }
    let origin = Point2::new((x0 + CANVAS_SNAP).floor(), (y0 + CANVAS_SNAP).floor());
    let width = ((x1 - CANVAS_SNAP).ceil() - origin.x) as usize;
    let height = ((y1 - CANVAS_SNAP).ceil() - origin.y) as usize;
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("empty canvas".into()));
    }
    if width.saturating_mul(height) > MAX_CANVAS_PIXELS {
        return Err(Error::InvalidInput(format!(
            "canvas of {width}x{height} pixels is too large"
        )));
    }
    Ok(Canvas {
        origin,
        width,
        height,
    })
}

pub const CANVAS_SNAP: f64 = 1e-6;
pub const MAX_CANVAS_PIXELS: usize = 1 << 28;

pub const NEWTON_ITERATIONS: usize = 8;
pub const NEWTON_TOLERANCE: f64 = 1e-6;
/// Slack on the unit parameter square so that pixels on shared edges are
/// claimed by some quad.
const PARAM_SLACK: f64 = 1e-7;

fn bilinear(q: &[Point2; 4], s: f64, t: f64) -> Point2 {
    // q: TL, TR, BR, BL.
    let top = q[0].lerp(q[1], s);
    let bottom = q[3].lerp(q[2], s);
    top.lerp(bottom, t)
}

/// Parameters `(s, t)` with `bilinear(q, s, t) = p`, by Newton iteration from
/// the quad centre. `None` if the iteration diverges.
pub fn invert_bilinear(q: &[Point2; 4], p: Point2) -> Option<(f64, f64)> {
    let (mut s, mut t) = (0.5, 0.5);
    for _ in 0..NEWTON_ITERATIONS {
        let r = bilinear(q, s, t) - p;
        let ds = (1.0 - t) * (q[1] - q[0]) + t * (q[2] - q[3]);
        let dt = (1.0 - s) * (q[3] - q[0]) + s * (q[2] - q[1]);
        let det = ds.cross(dt);
        if det.abs() < 1e-12 {
            return None;
        }
        let step_s = (r.x * dt.y - r.y * dt.x) / det;
        let step_t = (ds.x * r.y - ds.y * r.x) / det;
        s -= step_s;
        t -= step_t;
        if !s.is_finite() || !t.is_finite() {
            return None;
        }
        if step_s.abs().max(step_t.abs()) < NEWTON_TOLERANCE {
            return Some((s, t));
        }
    }
    (bilinear(q, s, t).dist(p) < 1e-6).then_some((s, t))
}

fn source_pixel(img: &RasterImage, x: f64, y: f64) -> bool {
    let (w, h) = (img.width as f64, img.height as f64);
    if !(x >= -0.5 && y >= -0.5 && x < w - 0.5 && y < h - 0.5) {
        return false;
    }
    let (xi, yi) = (
        (x.round() as usize).min(img.width - 1),
        (y.round() as usize).min(img.height - 1),
    );
    img.is_valid(xi, yi)
}

fn render_rows(
    img: &RasterImage,
    canvas: &Canvas,
    lookup: impl Fn(Point2) -> Option<Point2> + Sync,
) -> Result<RasterImage> {
    let ch = img.channels;
    let rows: Vec<(Vec<u8>, Vec<bool>)> = (0..canvas.height)
        .into_par_iter()
        .map(|y| {
            let mut data = vec![0u8; canvas.width * ch];
            let mut mask = vec![false; canvas.width];
            for x in 0..canvas.width {
                if let Some(src) = lookup(canvas.from_canvas(x, y)) {
                    if source_pixel(img, src.x, src.y) {
                        mask[x] = true;
                        for c in 0..ch {
                            data[x * ch + c] =
                                img.sample(src.x, src.y, c).round().clamp(0.0, 255.0) as u8;
                        }
                    }
                }
            }
            (data, mask)
        })
        .collect();
    let mut out = RasterImage::new(canvas.width, canvas.height, ch)?;
    let mut mask = Vec::with_capacity(canvas.width * canvas.height);
    for (y, (d, m)) in rows.into_iter().enumerate() {
        out.data[y * canvas.width * ch..(y + 1) * canvas.width * ch].copy_from_slice(&d);
        mask.extend(m);
    }
    out.mask = Some(mask);
    Ok(out)
}

/// Resamples `img` onto `canvas` through an arbitrary canvas-to-source map.
pub fn resample(
    img: &RasterImage,
    canvas: &Canvas,
    inverse: impl Fn(Point2) -> Option<Point2> + Sync,
) -> Result<RasterImage> {
    render_rows(img, canvas, inverse)
}

/// Texture-maps `img` through the mesh deformed to `v`. Each canvas pixel is
/// pulled back through the bilinear map of a covering quad; where quads
/// overlap (fold-over) the quad whose parameters lie nearest its centre wins.
pub fn warp_image(
    img: &RasterImage,
    grid: &MeshGrid,
    v: &[f64],
    canvas: &Canvas,
) -> Result<RasterImage> {
    if v.len() != grid.vertices.len() {
        return Err(Error::InvalidInput(
            "vertex vector does not match the grid".into(),
        ));
    }
    let folds = grid.fold_overs(v);
    if !folds.is_empty() {
        log::warn!(
            "{} folded cells; overlapping pixels use the nearest-parameter quad",
            folds.len()
        );
    }
    struct Quad {
        dst: [Point2; 4],
        row: usize,
        col: usize,
        y0: f64,
        y1: f64,
        x0: f64,
        x1: f64,
    }
    let mut quads = Vec::with_capacity(grid.cell_count());
    for r in 0..grid.rows - 1 {
        for c in 0..grid.cols - 1 {
            let dst = grid.quad(r, c).map(|i| Point2::new(v[2 * i], v[2 * i + 1]));
            if !dst.iter().all(|p| p.is_finite()) {
                continue;
            }
            let xs = dst.map(|p| p.x);
            let ys = dst.map(|p| p.y);
            quads.push(Quad {
                dst,
                row: r,
                col: c,
                x0: xs.iter().cloned().fold(f64::INFINITY, f64::min),
                x1: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                y0: ys.iter().cloned().fold(f64::INFINITY, f64::min),
                y1: ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    let ambiguous = std::sync::atomic::AtomicUsize::new(0);
    let lookup = |p: Point2| -> Option<Point2> {
        let mut best: Option<(f64, Point2)> = None;
        let mut hits = 0;
        for q in quads
            .iter()
            .filter(|q| p.y >= q.y0 && p.y <= q.y1 && p.x >= q.x0 && p.x <= q.x1)
        {
            let Some((s, t)) = invert_bilinear(&q.dst, p) else {
                continue;
            };
            if !(-PARAM_SLACK..=1.0 + PARAM_SLACK).contains(&s)
                || !(-PARAM_SLACK..=1.0 + PARAM_SLACK).contains(&t)
            {
                continue;
            }
            hits += 1;
            let score = (s - 0.5).abs().max((t - 0.5).abs());
            if best.is_none_or(|b| score < b.0) {
                let tl = grid.vertex(grid.index(q.row, q.col));
                let br = grid.vertex(grid.index(q.row + 1, q.col + 1));
                let src = Point2::new(
                    tl.x + s.clamp(0.0, 1.0) * (br.x - tl.x),
                    tl.y + t.clamp(0.0, 1.0) * (br.y - tl.y),
                );
                best = Some((score, src));
            }
        }
        // Pixels exactly on a shared edge hit two quads without folding.
        if hits > 1 && best.is_some_and(|b| b.0 < 0.5 - 1e-6) {
            ambiguous.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        }
        best.map(|b| b.1)
    };
    let out = render_rows(img, canvas, lookup)?;
    let n = ambiguous.into_inner();
    if n > 0 {
        log::warn!("{n} canvas pixels covered by several quads");
    }
    Ok(out)
}

/// Euclidean distance from every pixel to the nearest invalid pixel, with
/// everything outside the image counted as invalid. Invalid pixels get 0.
pub fn distance_to_invalid(mask: &[bool], width: usize, height: usize) -> Vec<f64> {
    // Squared distance transform on a one-pixel invalid frame.
    let (w, h) = (width + 2, height + 2);
    let inf = 1e20;
    let mut f = vec![inf; w * h];
    for y in 0..h {
        for x in 0..w {
            let inside = x >= 1 && y >= 1 && x <= width && y <= height;
            if !inside || !mask[(y - 1) * width + (x - 1)] {
                f[y * w + x] = 0.0;
            }
        }
    }
    let mut buf = vec![0.0; w.max(h)];
    for x in 0..w {
        let col: Vec<f64> = (0..h).map(|y| f[y * w + x]).collect();
        edt_1d(&col, &mut buf[..h]);
        for y in 0..h {
            f[y * w + x] = buf[y];
        }
    }
    for y in 0..h {
        let row = f[y * w..(y + 1) * w].to_vec();
        edt_1d(&row, &mut buf[..w]);
        f[y * w..(y + 1) * w].copy_from_slice(&buf[..w]);
    }
    let mut out = Vec::with_capacity(width * height);
    for y in 1..=height {
        for x in 1..=width {
            out.push(f[y * w + x].sqrt());
        }
    }
    out
}

/// Lower envelope of parabolas for a 1-D squared distance transform.
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere.
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *dq = (q as f64 - p as f64).powi(2) + f[p];
    }
}

fn layer_mask(l: &RasterImage) -> Vec<bool> {
    l.mask
        .clone()
        .unwrap_or_else(|| vec![true; l.width * l.height])
}

/// Per-layer normalized feathering weights; zero where a layer is invalid.
pub fn blend_weights(layers: &[RasterImage]) -> Result<Vec<Vec<f64>>> {
    let first = layers.first().ok_or(Error::EmptySet)?;
    let (w, h) = (first.width, first.height);
    if layers
        .iter()
        .any(|l| l.width != w || l.height != h || l.channels != first.channels)
    {
        return Err(Error::InvalidInput(
            "layers must share size and channel count".into(),
        ));
    }
    let mut weights: Vec<Vec<f64>> = layers
        .par_iter()
        .map(|l| distance_to_invalid(&layer_mask(l), w, h))
        .collect();
    for i in 0..w * h {
        let sum: f64 = weights.iter().map(|wt| wt[i]).sum();
        if sum > 0.0 {
            for wt in weights.iter_mut() {
                wt[i] /= sum;
            }
        }
    }
    Ok(weights)
}

/// Feather blend of layers on a shared canvas. The output mask is the union
/// of the layer masks.
pub fn blend(layers: &[RasterImage]) -> Result<RasterImage> {
    let weights = blend_weights(layers)?;
    let first = &layers[0];
    let (w, h, ch) = (first.width, first.height, first.channels);
    let mut out = RasterImage::new(w, h, ch)?;
    let mut mask = vec![false; w * h];
    for i in 0..w * h {
        let valid: Vec<usize> = (0..layers.len()).filter(|&l| weights[l][i] > 0.0).collect();
        if valid.is_empty() {
            continue;
        }
        mask[i] = true;
        for c in 0..ch {
            let v = if valid.len() == 1 {
                layers[valid[0]].data[i * ch + c] as f64
            } else {
                valid
                    .iter()
                    .map(|&l| weights[l][i] * layers[l].data[i * ch + c] as f64)
                    .sum()
            };
            out.data[i * ch + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out.mask = Some(mask);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newton_inverts_a_skewed_quad() {
        let q = [
            Point2::new(0.0, 0.0),
            Point2::new(10.0, 1.0),
            Point2::new(12.0, 9.0),
            Point2::new(-1.0, 11.0),
        ];
        let p = bilinear(&q, 0.3, 0.8);
        let (s, t) = invert_bilinear(&q, p).unwrap();
        assert!((s - 0.3).abs() < 1e-9 && (t - 0.8).abs() < 1e-9);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let (w, h) = (9, 7);
        let mask: Vec<bool> = (0..w * h).map(|i| i != 3 * w + 4 && i % 5 != 0).collect();
        let d = distance_to_invalid(&mask, w, h);
        for y in 0..h {
            for x in 0..w {
                let mut best = f64::INFINITY;
                for yy in -1..=h as i64 {
                    for xx in -1..=w as i64 {
                        let outside = xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64;
                        if outside || !mask[yy as usize * w + xx as usize] {
                            best = best.min(
                                (((xx - x as i64).pow(2) + (yy - y as i64).pow(2)) as f64).sqrt(),
                            );
                        }
                    }
                }
                assert!((d[y * w + x] - best).abs() < 1e-12, "({x},{y})");
            }
        }
    }
}
