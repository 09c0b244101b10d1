//! Point and line bundle adjustment over several images, and the joint
//! mesh solve that couples every image's mesh through shared reference-frame
//! feature positions.
//!
//! `H_k` maps reference coordinates into image `k`; the reference image keeps
//! the identity and is excluded from the parameters.

use std::collections::{BTreeMap, BinaryHeap};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{MultiCorrespondenceSet, MultiLine, MultiPoint};
use crate::geometry::{
    estimate_dlt, Homography, LineEq, LinePair, LineSegment, Point2, PointPair, DENOM_TOL,
};
use crate::linework::{CrossLineSamples, SalientLine};
use crate::meshwarp::{
    assemble_perspective, assemble_projective, assemble_saliency, solve, EnergyRow, EnergySystem,
    Lambdas, MeshGrid, Term, WarpSolution,
};

/// Residual used for blocks whose projection hits the line at infinity.
pub const SENTINEL: f64 = 1e6;

/// Features detected in one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageFeatures {
    pub points: Vec<Point2>,
    pub lines: Vec<LineSegment>,
}

/// Index matches between the features of images `a` and `b`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairMatches {
    pub a: usize,
    pub b: usize,
    pub points: Vec<(usize, usize)>,
    pub lines: Vec<(usize, usize)>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Groups pairwise matches into identities by transitivity. An identity that
/// reaches two features of one image keeps the first (lowest index) one.
pub fn cluster_matches(
    features: &[ImageFeatures],
    matches: &[PairMatches],
) -> Result<MultiCorrespondenceSet> {
    let k = features.len();
    for m in matches {
        if m.a >= k || m.b >= k || m.a == m.b {
            return Err(Error::InvalidInput(format!(
                "match between images {} and {}",
                m.a, m.b
            )));
        }
    }
    let cluster = |count: &dyn Fn(usize) -> usize,
                   pairs: &dyn Fn(&PairMatches) -> &Vec<(usize, usize)>|
     -> Result<Vec<BTreeMap<usize, usize>>> {
        let offsets: Vec<usize> = (0..k)
            .scan(0, |acc, i| {
                let o = *acc;
                *acc += count(i);
                Some(o)
            })
            .collect();
        let total = (0..k).map(count).sum();
        let mut uf = UnionFind::new(total);
        let mut used = vec![false; total];
        for m in matches {
            for &(i, j) in pairs(m) {
                if i >= count(m.a) || j >= count(m.b) {
                    return Err(Error::InvalidInput(format!(
                        "feature index out of range in match {}-{}",
                        m.a, m.b
                    )));
                }
                let (u, v) = (offsets[m.a] + i, offsets[m.b] + j);
                used[u] = true;
                used[v] = true;
                uf.union(u, v);
            }
        }
        let mut groups: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
        for img in 0..k {
            for f in 0..count(img) {
                let node = offsets[img] + f;
                if !used[node] {
                    continue;
                }
                let g = groups.entry(uf.find(node)).or_default();
                if let std::collections::btree_map::Entry::Vacant(e) = g.entry(img) {
                    e.insert(f);
                } else {
                    log::debug!("identity reaches two features of image {img}; keeping the first");
                }
            }
        }
        Ok(groups.into_values().filter(|g| g.len() >= 2).collect())
    };
    let pts = cluster(&|i| features[i].points.len(), &|m| &m.points)?;
    let lns = cluster(&|i| features[i].lines.len(), &|m| &m.lines)?;
    let points = pts
        .into_iter()
        .enumerate()
        .map(|(n, g)| MultiPoint {
            id: format!("p{n}"),
            obs: g
                .into_iter()
                .map(|(img, f)| (img, [features[img].points[f].x, features[img].points[f].y]))
                .collect(),
        })
        .collect();
    let lines = lns
        .into_iter()
        .enumerate()
        .map(|(n, g)| MultiLine {
            id: format!("l{n}"),
            obs: g
                .into_iter()
                .map(|(img, f)| {
                    let s = features[img].lines[f];
                    (img, [[s.start.x, s.start.y], [s.end.x, s.end.y]])
                })
                .collect(),
        })
        .collect();
    Ok(MultiCorrespondenceSet { points, lines })
}

/// Number of shared identities between every pair of images.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchGraph {
    pub images: usize,
    pub counts: Vec<Vec<usize>>,
}

impl MatchGraph {
    pub fn from_set(set: &MultiCorrespondenceSet, images: usize) -> Self {
        let mut counts = vec![vec![0; images]; images];
        let keys = set
            .points
            .iter()
            .map(|p| p.obs.keys().copied().collect::<Vec<_>>())
            .chain(set.lines.iter().map(|l| l.obs.keys().copied().collect()));
        for ks in keys {
            for (i, &a) in ks.iter().enumerate() {
                for &b in &ks[i + 1..] {
                    if a < images && b < images {
                        counts[a][b] += 1;
                        counts[b][a] += 1;
                    }
                }
            }
        }
        MatchGraph { images, counts }
    }

    /// Total matches per image.
    pub fn totals(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Shortest-path parents from `root` with edge cost `1 / count`.
    pub fn chains(&self, root: usize) -> Result<Vec<Option<usize>>> {
        if root >= self.images {
            return Err(Error::InvalidInput(format!(
                "reference index {root} of {}",
                self.images
            )));
        }
        #[derive(PartialEq)]
        struct Item(f64, usize);
        impl Eq for Item {}
        impl PartialOrd for Item {
            fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
                Some(self.cmp(o))
            }
        }
        impl Ord for Item {
            fn cmp(&self, o: &Self) -> std::cmp::Ordering {
                o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
            }
        }
        let n = self.images;
        let mut dist = vec![f64::INFINITY; n];
        let mut parent = vec![None; n];
        let mut heap = BinaryHeap::new();
        dist[root] = 0.0;
        heap.push(Item(0.0, root));
        while let Some(Item(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for v in 0..n {
                let c = self.counts[u][v];
                if v == u || c == 0 {
                    continue;
                }
                let nd = d + 1.0 / c as f64;
                if nd < dist[v] {
                    dist[v] = nd;
                    parent[v] = Some(u);
                    heap.push(Item(nd, v));
                }
            }
        }
        let unreachable: Vec<usize> = (0..n).filter(|&i| dist[i].is_infinite()).collect();
        if !unreachable.is_empty() {
            return Err(Error::DisconnectedGraph(unreachable));
        }
        Ok(parent)
    }
}

fn pt(v: [f64; 2]) -> Point2 {
    Point2::new(v[0], v[1])
}

/// DLT from image `from` to image `to` on their shared identities.
pub fn pair_homography(set: &MultiCorrespondenceSet, from: usize, to: usize) -> Result<Homography> {
    let points: Vec<PointPair> = set
        .points
        .iter()
        .filter_map(|p| Some(PointPair::new(pt(*p.obs.get(&from)?), pt(*p.obs.get(&to)?))))
        .collect();
    let lines: Vec<LinePair> = set
        .lines
        .iter()
        .filter_map(|l| {
            let a = l.obs.get(&from)?;
            let b = l.obs.get(&to)?;
            Some(LinePair {
                seg: LineSegment::new(pt(a[0]), pt(a[1])).ok()?,
                line: LineEq::through(pt(b[0]), pt(b[1])).ok()?,
            })
        })
        .collect();
    estimate_dlt(&points, &lines)
}

/// Maps from every image into the reference along the strongest chains.
pub fn chain_homographies(
    set: &MultiCorrespondenceSet,
    images: usize,
    reference: usize,
) -> Result<Vec<Homography>> {
    let parents = MatchGraph::from_set(set, images).chains(reference)?;
    let mut out: Vec<Option<Homography>> = vec![None; images];
    out[reference] = Some(Homography::identity());
    // Resolve parents first; depth is bounded by the image count.
    for _ in 0..images {
        for k in 0..images {
            if out[k].is_some() {
                continue;
            }
            let p = parents[k].expect("connected graph");
            if let Some(tp) = out[p] {
                let step = pair_homography(set, k, p)?;
                out[k] = Some(tp.compose(&step)?);
            }
        }
    }
    Ok(out.into_iter().map(|h| h.expect("all reachable")).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundlePoint {
    pub id: String,
    pub obs: Vec<(usize, Point2)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleLine {
    pub id: String,
    /// Observed segment per image.
    pub obs: Vec<(usize, LineSegment)>,
    /// Unit-normal line through each observed segment.
    pub eqs: Vec<LineEq>,
    /// Length floor, the initial endpoint distance.
    pub length: f64,
}

/// Parameters: homographies (reference to image), latent points and line
/// endpoints in reference coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub h: Vec<Homography>,
    pub x: Vec<Point2>,
    pub y: Vec<[Point2; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleProblem {
    pub images: usize,
    pub reference: usize,
    pub points: Vec<BundlePoint>,
    pub lines: Vec<BundleLine>,
    pub init: Theta,
}

fn mean(ps: &[Point2]) -> Point2 {
    let n = ps.len() as f64;
    Point2::new(
        ps.iter().map(|p| p.x).sum::<f64>() / n,
        ps.iter().map(|p| p.y).sum::<f64>() / n,
    )
}

/// Chains every observation into the reference, averages per identity and
/// initializes each `H_k` by DLT between the averaged reference coordinates
/// and image `k`'s observations.
pub fn build_problem(
    set: &MultiCorrespondenceSet,
    images: usize,
    reference: usize,
) -> Result<BundleProblem> {
    set.validate(images)?;
    let to_ref = chain_homographies(set, images, reference)?;
    let mut points = Vec::new();
    let mut x = Vec::new();
    for p in &set.points {
        let obs: Vec<(usize, Point2)> = p.obs.iter().map(|(&k, &v)| (k, pt(v))).collect();
        let mapped: Result<Vec<Point2>> = obs.iter().map(|&(k, q)| to_ref[k].apply(q)).collect();
        match mapped {
            Ok(m) if !m.is_empty() => {
                x.push(mean(&m));
                points.push(BundlePoint {
                    id: p.id.clone(),
                    obs,
                });
            }
            _ => log::warn!("point {} maps to infinity; dropped", p.id),
        }
    }
    let mut lines = Vec::new();
    let mut y = Vec::new();
    'lines: for l in &set.lines {
        let mut obs = Vec::new();
        let mut eqs = Vec::new();
        let mut ends: Vec<[Point2; 2]> = Vec::new();
        for (&k, v) in &l.obs {
            let seg = LineSegment::new(pt(v[0]), pt(v[1]))?;
            let (Ok(s), Ok(e)) = (to_ref[k].apply(seg.start), to_ref[k].apply(seg.end)) else {
                log::warn!("line {} maps to infinity; dropped", l.id);
                continue 'lines;
            };
            // Orient every projected segment like the first one.
            let pair = match ends.first() {
                Some(f) if (e - s).dot(f[1] - f[0]) < 0.0 => [e, s],
                _ => [s, e],
            };
            ends.push(pair);
            eqs.push(seg.line()?);
            obs.push((k, seg));
        }
        let s = mean(&ends.iter().map(|e| e[0]).collect::<Vec<_>>());
        let e = mean(&ends.iter().map(|e| e[1]).collect::<Vec<_>>());
        let length = s.dist(e);
        if !(length > 0.0) {
            log::warn!("line {} collapses in the reference frame; dropped", l.id);
            continue;
        }
        y.push([s, e]);
        lines.push(BundleLine {
            id: l.id.clone(),
            obs,
            eqs,
            length,
        });
    }
    let mut h = vec![Homography::identity(); images];
    for (k, hk) in h.iter_mut().enumerate() {
        if k == reference {
            continue;
        }
        let pp: Vec<PointPair> = points
            .iter()
            .zip(&x)
            .filter_map(|(p, &xi)| {
                p.obs
                    .iter()
                    .find(|o| o.0 == k)
                    .map(|o| PointPair::new(xi, o.1))
            })
            .collect();
        let lp: Vec<LinePair> = lines
            .iter()
            .zip(&y)
            .filter_map(|(l, yj)| {
                let i = l.obs.iter().position(|o| o.0 == k)?;
                Some(LinePair {
                    seg: LineSegment::new(yj[0], yj[1]).ok()?,
                    line: l.eqs[i],
                })
            })
            .collect();
        *hk = match estimate_dlt(&pp, &lp) {
            Ok(d) => d,
            Err(e) => {
                log::debug!("direct DLT for image {k} failed ({e}); using the chain");
                to_ref[k].invert()?
            }
        };
    }
    Ok(BundleProblem {
        images,
        reference,
        points,
        lines,
        init: Theta { h, x, y },
    })
}

/// Block-sparse Jacobian row: one homography block and one latent block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianRow {
    pub residual: f64,
    /// Parameter slot of the homography block, if the image is not the
    /// reference.
    pub cam: Option<usize>,
    pub d_cam: [f64; 8],
    /// Latent entity: points first, then lines.
    pub entity: usize,
    pub d_entity: [f64; 4],
}

impl BundleProblem {
    /// Parameter slot of each image's homography (reference: none).
    pub fn cam_slot(&self, k: usize) -> Option<usize> {
        match k.cmp(&self.reference) {
            std::cmp::Ordering::Less => Some(k),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(k - 1),
        }
    }

    pub fn cam_count(&self) -> usize {
        self.images - 1
    }

    pub fn entity_dim(&self, e: usize) -> usize {
        if e < self.points.len() {
            2
        } else {
            4
        }
    }

    /// Offset of entity `e` in the flat parameter vector.
    pub fn entity_offset(&self, e: usize) -> usize {
        let base = 8 * self.cam_count();
        if e < self.points.len() {
            base + 2 * e
        } else {
            base + 2 * self.points.len() + 4 * (e - self.points.len())
        }
    }

    pub fn parameter_count(&self) -> usize {
        8 * self.cam_count() + 2 * self.points.len() + 4 * self.lines.len()
    }

    pub fn to_vector(&self, t: &Theta) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.parameter_count());
        for k in (0..self.images).filter(|&k| k != self.reference) {
            v.extend_from_slice(&t.h[k].h);
        }
        for p in &t.x {
            v.extend([p.x, p.y]);
        }
        for y in &t.y {
            v.extend([y[0].x, y[0].y, y[1].x, y[1].y]);
        }
        v
    }

    pub fn from_vector(&self, v: &[f64]) -> Theta {
        let mut h = vec![Homography::identity(); self.images];
        for (k, hk) in h.iter_mut().enumerate() {
            if let Some(s) = self.cam_slot(k) {
                hk.h.copy_from_slice(&v[8 * s..8 * s + 8]);
            }
        }
        let x = (0..self.points.len())
            .map(|i| {
                let o = self.entity_offset(i);
                Point2::new(v[o], v[o + 1])
            })
            .collect();
        let y = (0..self.lines.len())
            .map(|j| {
                let o = self.entity_offset(self.points.len() + j);
                [Point2::new(v[o], v[o + 1]), Point2::new(v[o + 2], v[o + 3])]
            })
            .collect();
        Theta { h, x, y }
    }

    /// Residual rows with their analytic derivatives, in a fixed order:
    /// point blocks, line blocks (start then end per observation), lengths.
    pub fn jacobian_rows(&self, t: &Theta) -> Vec<JacobianRow> {
        let np = self.points.len();
        let point_rows = self.points.par_iter().enumerate().flat_map_iter(|(i, p)| {
            let s = 1.0 / (p.obs.len() as f64).sqrt();
            p.obs
                .iter()
                .flat_map(move |&(k, obs)| {
                    let cam = self.cam_slot(k);
                    match project(&t.h[k], t.x[i]) {
                        Some(pr) => [0, 1]
                            .map(|axis| {
                                let f = if axis == 0 { pr.u } else { pr.v };
                                let o = if axis == 0 { obs.x } else { obs.y };
                                let mut d_entity = [0.0; 4];
                                d_entity[0] = -s * pr.dx[axis];
                                d_entity[1] = -s * pr.dy[axis];
                                JacobianRow {
                                    residual: s * (o - f),
                                    cam,
                                    d_cam: pr.dh[axis].map(|d| -s * d),
                                    entity: i,
                                    d_entity,
                                }
                            })
                            .to_vec(),
                        None => {
                            log::warn!("residual block projects to infinity; using the sentinel");
                            [0, 1].map(|_| sentinel_row(cam, i)).to_vec()
                        }
                    }
                })
                .collect::<Vec<_>>()
        });
        let mut rows: Vec<JacobianRow> = point_rows.collect();
        let line_rows: Vec<JacobianRow> = self
            .lines
            .par_iter()
            .enumerate()
            .flat_map_iter(|(j, l)| {
                let s = 1.0 / (l.obs.len() as f64).sqrt();
                let e = np + j;
                let mut out = Vec::with_capacity(2 * l.obs.len());
                for (&(k, _), eq) in l.obs.iter().zip(&l.eqs) {
                    let cam = self.cam_slot(k);
                    let n = eq.normal();
                    for end in 0..2 {
                        match project(&t.h[k], t.y[j][end]) {
                            Some(pr) => {
                                let mut d_entity = [0.0; 4];
                                d_entity[2 * end] = s * (n.x * pr.dx[0] + n.y * pr.dx[1]);
                                d_entity[2 * end + 1] = s * (n.x * pr.dy[0] + n.y * pr.dy[1]);
                                let mut d_cam = [0.0; 8];
                                for (q, d) in d_cam.iter_mut().enumerate() {
                                    *d = s * (n.x * pr.dh[0][q] + n.y * pr.dh[1][q]);
                                }
                                out.push(JacobianRow {
                                    residual: s * (n.x * pr.u + n.y * pr.v + eq.c),
                                    cam,
                                    d_cam,
                                    entity: e,
                                    d_entity,
                                });
                            }
                            None => {
                                log::warn!(
                                    "residual block projects to infinity; using the sentinel"
                                );
                                out.push(sentinel_row(cam, e));
                            }
                        }
                    }
                }
                out
            })
            .collect();
        rows.extend(line_rows);
        for (j, l) in self.lines.iter().enumerate() {
            let d = t.y[j][0] - t.y[j][1];
            let len = d.norm();
            let u = if len > 0.0 {
                d / len
            } else {
                Point2::new(0.0, 0.0)
            };
            rows.push(JacobianRow {
                residual: len - l.length,
                cam: None,
                d_cam: [0.0; 8],
                entity: np + j,
                d_entity: [u.x, u.y, -u.x, -u.y],
            });
        }
        rows
    }

    pub fn residuals(&self, t: &Theta) -> Vec<f64> {
        self.jacobian_rows(t).iter().map(|r| r.residual).collect()
    }

    pub fn energy(&self, t: &Theta) -> f64 {
        self.residuals(t).iter().map(|r| r * r).sum()
    }

    /// Dense analytic Jacobian over the flat parameter vector.
    pub fn dense_jacobian(&self, t: &Theta) -> DMatrix<f64> {
        let rows = self.jacobian_rows(t);
        let mut j = DMatrix::zeros(rows.len(), self.parameter_count());
        for (r, row) in rows.iter().enumerate() {
            if let Some(c) = row.cam {
                for q in 0..8 {
                    j[(r, 8 * c + q)] = row.d_cam[q];
                }
            }
            let o = self.entity_offset(row.entity);
            for q in 0..self.entity_dim(row.entity) {
                j[(r, o + q)] = row.d_entity[q];
            }
        }
        j
    }

    /// Central finite-difference Jacobian; perspective entries of each
    /// homography use a smaller step to match their scale.
    pub fn numeric_jacobian(&self, t: &Theta) -> DMatrix<f64> {
        let v = self.to_vector(t);
        let m = self.residuals(t).len();
        let mut j = DMatrix::zeros(m, v.len());
        for c in 0..v.len() {
            let persp = c < 8 * self.cam_count() && c % 8 >= 6;
            let step = 1e-6 * v[c].abs().max(if persp { 1e-4 } else { 1.0 });
            let mut plus = v.clone();
            let mut minus = v.clone();
            plus[c] += step;
            minus[c] -= step;
            let rp = self.residuals(&self.from_vector(&plus));
            let rm = self.residuals(&self.from_vector(&minus));
            for r in 0..m {
                j[(r, c)] = (rp[r] - rm[r]) / (2.0 * step);
            }
        }
        j
    }

    /// Largest column-wise relative difference between the analytic and the
    /// finite-difference Jacobian.
    pub fn jacobian_check(&self, t: &Theta) -> f64 {
        let a = self.dense_jacobian(t);
        let n = self.numeric_jacobian(t);
        (0..a.ncols())
            .map(|c| {
                let diff = (a.column(c) - n.column(c)).norm();
                let scale = n.column(c).norm().max(a.column(c).norm());
                if scale == 0.0 {
                    0.0
                } else {
                    diff / scale
                }
            })
            .fold(0.0, f64::max)
    }

    /// Root mean squared reprojection error of the point observations
    /// (unweighted), for reporting.
    pub fn reprojection_rmse(&self, t: &Theta) -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for (i, p) in self.points.iter().enumerate() {
            for &(k, o) in &p.obs {
                acc += t.h[k]
                    .apply(t.x[i])
                    .map_or(SENTINEL * SENTINEL, |q| q.dist(o).powi(2));
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            (acc / n as f64).sqrt()
        }
    }
}

fn sentinel_row(cam: Option<usize>, entity: usize) -> JacobianRow {
    JacobianRow {
        residual: SENTINEL,
        cam,
        d_cam: [0.0; 8],
        entity,
        d_entity: [0.0; 4],
    }
}

struct Projection {
    u: f64,
    v: f64,
    /// d(u, v) / d(h0..h7).
    dh: [[f64; 8]; 2],
    /// d(u, v) / dx and / dy.
    dx: [f64; 2],
    dy: [f64; 2],
}

fn project(h: &Homography, p: Point2) -> Option<Projection> {
    let h = &h.h;
    let w = h[6] * p.x + h[7] * p.y + 1.0;
    if w.abs() <= DENOM_TOL {
        return None;
    }
    let u = (h[0] * p.x + h[1] * p.y + h[2]) / w;
    let v = (h[3] * p.x + h[4] * p.y + h[5]) / w;
    let (x, y) = (p.x / w, p.y / w);
    let iw = 1.0 / w;
    Some(Projection {
        u,
        v,
        dh: [
            [x, y, iw, 0.0, 0.0, 0.0, -u * x, -u * y],
            [0.0, 0.0, 0.0, x, y, iw, -v * x, -v * y],
        ],
        dx: [(h[0] - u * h[6]) * iw, (h[3] - v * h[6]) * iw],
        dy: [(h[1] - u * h[7]) * iw, (h[4] - v * h[7]) * iw],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    /// Initial damping as a multiple of the mean normal-matrix diagonal.
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub max_iterations: usize,
    /// Stop when the largest gradient entry falls below this.
    pub gradient_tolerance: f64,
    /// Stop when the step is this small relative to the parameters.
    pub step_tolerance: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            max_iterations: 100,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Gradient,
    Step,
    MaxIterations,
    /// Damping grew without finding a decrease.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmReport {
    pub theta: Theta,
    /// Energy at the start and after every accepted step.
    pub energies: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

impl LmReport {
    pub fn converged(&self) -> bool {
        matches!(self.termination, Termination::Gradient | Termination::Step)
    }
}

/// Block normal equations `JᵀJ` and `Jᵀr`.
struct Normal {
    u: Vec<DMatrix<f64>>,
    gc: Vec<DVector<f64>>,
    v: Vec<DMatrix<f64>>,
    ge: Vec<DVector<f64>>,
    w: BTreeMap<(usize, usize), DMatrix<f64>>,
}

fn normal_blocks(p: &BundleProblem, rows: &[JacobianRow]) -> Normal {
    let nc = p.cam_count();
    let ne = p.points.len() + p.lines.len();
    let mut n = Normal {
        u: vec![DMatrix::zeros(8, 8); nc],
        gc: vec![DVector::zeros(8); nc],
        v: (0..ne)
            .map(|e| DMatrix::zeros(p.entity_dim(e), p.entity_dim(e)))
            .collect(),
        ge: (0..ne).map(|e| DVector::zeros(p.entity_dim(e))).collect(),
        w: BTreeMap::new(),
    };
    for r in rows {
        let d = p.entity_dim(r.entity);
        let je = &r.d_entity[..d];
        for a in 0..d {
            n.ge[r.entity][a] += je[a] * r.residual;
            for b in 0..d {
                n.v[r.entity][(a, b)] += je[a] * je[b];
            }
        }
        if let Some(c) = r.cam {
            let jc = &r.d_cam;
            let w =
                n.w.entry((c, r.entity))
                    .or_insert_with(|| DMatrix::zeros(8, d));
            for a in 0..8 {
                n.gc[c][a] += jc[a] * r.residual;
                for b in 0..8 {
                    n.u[c][(a, b)] += jc[a] * jc[b];
                }
                for b in 0..d {
                    w[(a, b)] += jc[a] * je[b];
                }
            }
        }
    }
    n
}

/// Damped Gauss-Newton step through the camera Schur complement.
/// Marquardt damping: each diagonal entry grows by `mu` times itself.
fn damped(m: &DMatrix<f64>, mu: f64) -> DMatrix<f64> {
    let floor = m.diagonal().amax().max(f64::MIN_POSITIVE) * 1e-12;
    let mut out = m.clone();
    for i in 0..m.nrows() {
        out[(i, i)] += mu * m[(i, i)].max(floor);
    }
    out
}

fn schur_step(p: &BundleProblem, n: &Normal, mu: f64) -> Option<Vec<f64>> {
    let nc = p.cam_count();
    let ne = n.v.len();
    let mut vinv = Vec::with_capacity(ne);
    for v in &n.v {
        vinv.push(damped(v, mu).cholesky()?.inverse());
    }
    let mut by_entity: Vec<Vec<usize>> = vec![Vec::new(); ne];
    for &(c, e) in n.w.keys() {
        by_entity[e].push(c);
    }
    let mut s = DMatrix::zeros(8 * nc, 8 * nc);
    let mut rhs = DVector::zeros(8 * nc);
    for c in 0..nc {
        s.view_mut((8 * c, 8 * c), (8, 8))
            .copy_from(&damped(&n.u[c], mu));
        rhs.rows_mut(8 * c, 8).copy_from(&(-&n.gc[c]));
    }
    for e in 0..ne {
        for &c1 in &by_entity[e] {
            let wv = &n.w[&(c1, e)] * &vinv[e];
            let corr = &wv * &n.ge[e];
            let mut r = rhs.rows_mut(8 * c1, 8);
            r += corr;
            for &c2 in &by_entity[e] {
                let block = &wv * n.w[&(c2, e)].transpose();
                let mut sv = s.view_mut((8 * c1, 8 * c2), (8, 8));
                sv -= block;
            }
        }
    }
    let dc = if nc == 0 {
        DVector::zeros(0)
    } else {
        match s.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => s.lu().solve(&rhs)?,
        }
    };
    let mut step: Vec<f64> = Vec::with_capacity(p.parameter_count());
    step.extend(dc.iter());
    for e in 0..ne {
        let mut r = -&n.ge[e];
        for &c in &by_entity[e] {
            r -= n.w[&(c, e)].transpose() * dc.rows(8 * c, 8);
        }
        step.extend((&vinv[e] * r).iter());
    }
    step.iter().all(|v| v.is_finite()).then_some(step)
}

/// Levenberg-Marquardt on the bundle energy, starting from `start`.
pub fn lm_solve(p: &BundleProblem, start: &Theta, cfg: &LmConfig) -> Result<LmReport> {
    if !(cfg.initial_damping > 0.0) || !(cfg.damping_up > 1.0) || !(cfg.damping_down > 1.0) {
        return Err(Error::InvalidInput(
            "damping settings must be positive and factors above one".into(),
        ));
    }
    let mut x = p.to_vector(start);
    let mut theta = start.clone();
    let mut rows = p.jacobian_rows(&theta);
    let mut e = rows.iter().map(|r| r.residual * r.residual).sum::<f64>();
    let mut energies = vec![e];
    let mut normal = normal_blocks(p, &rows);
    let mut mu = cfg.initial_damping;
    let mu_floor = 1e-12;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        let grad = normal
            .gc
            .iter()
            .chain(&normal.ge)
            .flat_map(|g| g.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if grad < cfg.gradient_tolerance {
            termination = Termination::Gradient;
            break;
        }
        iterations += 1;
        let mut accepted = false;
        while mu < 1e32 {
            let Some(step) = schur_step(p, &normal, mu) else {
                mu *= cfg.damping_up;
                continue;
            };
            let step_norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
            let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if step_norm <= cfg.step_tolerance * (x_norm + cfg.step_tolerance) {
                termination = Termination::Step;
                break;
            }
            let cand: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + b).collect();
            let cand_theta = p.from_vector(&cand);
            let cand_rows = p.jacobian_rows(&cand_theta);
            let ce = cand_rows
                .iter()
                .map(|r| r.residual * r.residual)
                .sum::<f64>();
            if ce < e {
                x = cand;
                theta = cand_theta;
                rows = cand_rows;
                e = ce;
                energies.push(e);
                normal = normal_blocks(p, &rows);
                mu = (mu / cfg.damping_down).max(mu_floor);
                accepted = true;
                break;
            }
            mu *= cfg.damping_up;
        }
        if termination == Termination::Step {
            break;
        }
        if !accepted {
            termination = Termination::Stalled;
            break;
        }
    }
    if !matches!(termination, Termination::Gradient | Termination::Step) {
        log::warn!("bundle adjustment stopped without converging ({termination:?}); returning the best parameters");
    }
    Ok(LmReport {
        theta,
        energies,
        iterations,
        termination,
    })
}

/// Per-image inputs of the joint mesh solve.
#[derive(Debug, Clone)]
pub struct ImageTerms {
    pub grid: MeshGrid,
    pub cross: Option<CrossLineSamples>,
    pub salient: Vec<SalientLine>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub lambdas: Lambdas,
    /// Keep the reference mesh at rest instead of solving for it.
    pub freeze_reference: bool,
    /// Fix the shared reference-frame positions to the bundle output.
    pub freeze_intermediates: bool,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            lambdas: Lambdas::default(),
            freeze_reference: true,
            freeze_intermediates: false,
        }
    }
}

/// Column layout of the joint system.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLayout {
    /// First column of each image's mesh, `None` when frozen.
    pub mesh: Vec<Option<usize>>,
    /// First column of the point intermediates (2 per point).
    pub points: Option<usize>,
    /// First column of the line offsets (1 per line).
    pub lines: Option<usize>,
    pub unknowns: usize,
}

impl JointLayout {
    pub fn new(grids: &[&MeshGrid], problem: &BundleProblem, cfg: &JointConfig) -> Self {
        let mut next = 0;
        let mesh = grids
            .iter()
            .enumerate()
            .map(|(k, g)| {
                if cfg.freeze_reference && k == problem.reference {
                    None
                } else {
                    let o = next;
                    next += 2 * g.n();
                    Some(o)
                }
            })
            .collect();
        let (points, lines) = if cfg.freeze_intermediates {
            (None, None)
        } else {
            let p = next;
            next += 2 * problem.points.len();
            let l = next;
            next += problem.lines.len();
            (Some(p), Some(l))
        };
        JointLayout {
            mesh,
            points,
            lines,
            unknowns: next,
        }
    }
}

/// Unit normal and offset of each optimized line.
pub fn line_normals(theta: &Theta) -> Vec<(Point2, f64)> {
    theta
        .y
        .iter()
        .map(|y| {
            let n = (y[1] - y[0]).perp().normalized();
            (n, -n.dot(y[0]))
        })
        .collect()
}

fn shifted(mut row: EnergyRow, offset: usize) -> EnergyRow {
    for c in row.coeffs.iter_mut() {
        c.0 += offset;
    }
    row
}

/// Alignment and line rows coupling each image's mesh to the shared
/// reference-frame unknowns, each observation weighted by
/// `1 / sqrt(observation count)`.
pub fn assemble_multi_alignment(
    grids: &[&MeshGrid],
    problem: &BundleProblem,
    theta: &Theta,
    layout: &JointLayout,
) -> Result<Vec<EnergyRow>> {
    if grids.len() != problem.images {
        return Err(Error::InvalidInput("one grid per image required".into()));
    }
    let mut rows = Vec::new();
    for (i, p) in problem.points.iter().enumerate() {
        let w = 1.0 / (p.obs.len() as f64).sqrt();
        for &(k, obs) in &p.obs {
            let anchor = match layout.mesh[k] {
                Some(_) => match grids[k].anchor(obs) {
                    Ok(a) => Some(a),
                    Err(Error::OutOfBounds { .. }) => {
                        log::warn!("point {} lies outside mesh {k}; observation skipped", p.id);
                        continue;
                    }
                    Err(e) => return Err(e),
                },
                None => None,
            };
            for axis in 0..2 {
                let mut coeffs = Vec::with_capacity(5);
                let mut rhs = 0.0;
                match (layout.mesh[k], &anchor) {
                    (Some(o), Some(a)) => {
                        for (&vi, &wt) in a.vertices.iter().zip(&a.weights) {
                            coeffs.push((o + 2 * vi + axis, wt));
                        }
                    }
                    _ => rhs -= if axis == 0 { obs.x } else { obs.y },
                }
                match layout.points {
                    Some(o) => coeffs.push((o + 2 * i + axis, -1.0)),
                    None => {
                        rhs += if axis == 0 {
                            theta.x[i].x
                        } else {
                            theta.x[i].y
                        }
                    }
                }
                if coeffs.is_empty() {
                    continue;
                }
                let mut r = EnergyRow::new(Term::Alignment, coeffs, rhs);
                r.weight = w;
                rows.push(r);
            }
        }
    }
    let normals = line_normals(theta);
    for (j, l) in problem.lines.iter().enumerate() {
        let w = 1.0 / (l.obs.len() as f64).sqrt();
        let (n, c) = normals[j];
        for &(k, seg) in &l.obs {
            for end in [seg.start, seg.end] {
                let mut coeffs = Vec::with_capacity(9);
                let mut rhs = 0.0;
                match layout.mesh[k] {
                    Some(o) => {
                        let a = match grids[k].anchor(end) {
                            Ok(a) => a,
                            Err(Error::OutOfBounds { .. }) => {
                                log::warn!("line {j} endpoint lies outside mesh {k}; skipped");
                                continue;
                            }
                            Err(e) => return Err(e),
                        };
                        for (&vi, &wt) in a.vertices.iter().zip(&a.weights) {
                            coeffs.push((o + 2 * vi, wt * n.x));
                            coeffs.push((o + 2 * vi + 1, wt * n.y));
                        }
                    }
                    None => rhs -= n.dot(end),
                }
                match layout.lines {
                    Some(o) => coeffs.push((o + j, 1.0)),
                    None => rhs -= c,
                }
                if coeffs.is_empty() {
                    continue;
                }
                let mut r = EnergyRow::new(Term::Naturalness, coeffs, rhs);
                r.weight = w;
                rows.push(r);
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSolution {
    /// Deformed vertices per image; frozen meshes are returned at rest.
    pub meshes: Vec<WarpSolution>,
    pub p_hat: Vec<Point2>,
    pub c_hat: Vec<f64>,
}

/// Builds the joint energy over every mesh and the shared intermediates.
pub fn build_joint_system(
    terms: &[ImageTerms],
    problem: &BundleProblem,
    theta: &Theta,
    cfg: &JointConfig,
) -> Result<(EnergySystem, JointLayout)> {
    cfg.lambdas.validate()?;
    let grids: Vec<&MeshGrid> = terms.iter().map(|t| &t.grid).collect();
    let layout = JointLayout::new(&grids, problem, cfg);
    if layout.unknowns == 0 {
        return Err(Error::InvalidInput("every unknown is frozen".into()));
    }
    let mut sys = EnergySystem::new(layout.unknowns, cfg.lambdas);
    sys.extend(assemble_multi_alignment(&grids, problem, theta, &layout)?);
    let mut prior = vec![0.0; layout.unknowns];
    for (k, t) in terms.iter().enumerate() {
        let Some(o) = layout.mesh[k] else { continue };
        if let Some(cross) = &t.cross {
            sys.extend(
                assemble_perspective(&t.grid, cross)
                    .into_iter()
                    .map(|r| shifted(r, o))
                    .collect(),
            );
            sys.extend(
                assemble_projective(&t.grid, cross)
                    .into_iter()
                    .map(|r| shifted(r, o))
                    .collect(),
            );
        }
        sys.extend(
            assemble_saliency(&t.grid, &t.salient)
                .into_iter()
                .map(|r| shifted(r, o))
                .collect(),
        );
        let to_ref = theta.h[k].invert()?;
        prior[o..o + 2 * t.grid.n()].copy_from_slice(&t.grid.map_vertices(&to_ref)?);
    }
    if let Some(o) = layout.points {
        for (i, x) in theta.x.iter().enumerate() {
            prior[o + 2 * i] = x.x;
            prior[o + 2 * i + 1] = x.y;
        }
    }
    if let Some(o) = layout.lines {
        for (j, (_, c)) in line_normals(theta).into_iter().enumerate() {
            prior[o + j] = c;
        }
    }
    sys.add_tikhonov(&prior);
    Ok((sys, layout))
}

/// One sparse least-squares solve over all meshes and intermediates.
pub fn joint_solve(
    terms: &[ImageTerms],
    problem: &BundleProblem,
    theta: &Theta,
    cfg: &JointConfig,
) -> Result<JointSolution> {
    let (sys, layout) = build_joint_system(terms, problem, theta, cfg)?;
    let sol = solve(&sys)?;
    let meshes = terms
        .iter()
        .enumerate()
        .map(|(k, t)| match layout.mesh[k] {
            Some(o) => WarpSolution {
                v: sol.v[o..o + 2 * t.grid.n()].to_vec(),
                rank_deficient: sol.rank_deficient,
                residual: sol.residual,
            },
            None => WarpSolution {
                v: t.grid.vertices.clone(),
                rank_deficient: false,
                residual: 0.0,
            },
        })
        .collect::<Vec<_>>();
    for (k, m) in meshes.iter().enumerate() {
        let folds = terms[k].grid.fold_overs(&m.v);
        if !folds.is_empty() {
            log::warn!("image {k}: fold-over in {} mesh cells", folds.len());
        }
    }
    let p_hat = match layout.points {
        Some(o) => (0..problem.points.len())
            .map(|i| Point2::new(sol.v[o + 2 * i], sol.v[o + 2 * i + 1]))
            .collect(),
        None => theta.x.clone(),
    };
    let c_hat = match layout.lines {
        Some(o) => sol.v[o..o + problem.lines.len()].to_vec(),
        None => line_normals(theta).into_iter().map(|(_, c)| c).collect(),
    };
    Ok(JointSolution {
        meshes,
        p_hat,
        c_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn union_find_merges_transitively() {
        let f = |pts: &[(f64, f64)]| ImageFeatures {
            points: pts.iter().map(|&(x, y)| Point2::new(x, y)).collect(),
            lines: vec![],
        };
        let feats = vec![
            f(&[(0.0, 0.0), (5.0, 5.0)]),
            f(&[(1.0, 0.0)]),
            f(&[(2.0, 0.0), (9.0, 9.0)]),
        ];
        let matches = vec![
            PairMatches {
                a: 0,
                b: 1,
                points: vec![(0, 0)],
                lines: vec![],
            },
            PairMatches {
                a: 1,
                b: 2,
                points: vec![(0, 0)],
                lines: vec![],
            },
        ];
        let set = cluster_matches(&feats, &matches).unwrap();
        assert_eq!(set.points.len(), 1);
        assert_eq!(set.points[0].obs.len(), 3);
        assert_eq!(set.points[0].obs[&2], [2.0, 0.0]);
    }

    #[test]
    fn disconnected_graph_lists_images() {
        let g = MatchGraph {
            images: 3,
            counts: vec![vec![0, 4, 0], vec![4, 0, 0], vec![0, 0, 0]],
        };
        assert!(matches!(g.chains(0), Err(Error::DisconnectedGraph(v)) if v == vec![2]));
        let parents = MatchGraph {
            images: 3,
            counts: vec![vec![0, 10, 1], vec![10, 0, 10], vec![1, 10, 0]],
        }
        .chains(0)
        .unwrap();
        assert_eq!(parents, vec![None, Some(0), Some(1)]);
    }

    #[test]
    fn projection_derivatives_match_differences() {
        let h = Homography::from_params([1.1, 0.1, 5.0, -0.05, 0.9, 3.0, 1e-3, -2e-3]).unwrap();
        let p = Point2::new(40.0, 25.0);
        let pr = project(&h, p).unwrap();
        let eps = 1e-6;
        let fx = (h.apply(p + Point2::new(eps, 0.0)).unwrap()
            - h.apply(p - Point2::new(eps, 0.0)).unwrap())
            / (2.0 * eps);
        assert!((fx.x - pr.dx[0]).abs() < 1e-6 && (fx.y - pr.dx[1]).abs() < 1e-6);
        for q in 0..8 {
            let mut a = h;
            let mut b = h;
            let e = if q >= 6 { 1e-9 } else { 1e-6 };
            a.h[q] += e;
            b.h[q] -= e;
            let d = (a.apply(p).unwrap() - b.apply(p).unwrap()) / (2.0 * e);
            assert!(
                (d.x - pr.dh[0][q]).abs() < 1e-4 * (1.0 + d.x.abs()),
                "u/h{q}"
            );
            assert!(
                (d.y - pr.dh[1][q]).abs() < 1e-4 * (1.0 + d.y.abs()),
                "v/h{q}"
            );
        }
    }
}
