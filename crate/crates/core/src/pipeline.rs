//! End-to-end stitching: the two-image flow, the multi-image flow through
//! bundle adjustment and the joint mesh solve, configuration and dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::apap::{fit_moving_dlt, LocalWarpField, MovingDltConfig};
use crate::bundle::{
    build_problem, cluster_matches, joint_solve, lm_solve, ImageFeatures, ImageTerms, JointConfig,
    LmConfig, MatchGraph, PairMatches, Termination,
};
use crate::error::{Error, Result};
use crate::features::{
    detect_corners, match_corners, ransac_homography, CornerConfig, CornerMatchConfig,
    CorrespondenceSet, MultiCorrespondenceSet,
};
use crate::geometry::{estimate_dlt, Homography, Point2, PointPair, Rect};
use crate::linework::{
    compute_omega, detect_segments, generate_cross_lines, match_segments_indexed, sample_salient,
    CrossLineSamples, MatchConfig, OverlapMask, SalientLine, SegmentConfig,
};
use crate::meshwarp::{
    build_grid, build_system, solve, EnergyBreakdown, Lambdas, MeshGrid, MeshTerms,
};
use crate::quasihomography::{
    select_frame_with, AnchorRule, CompositeWarp, CrossLineFrame, OverlapRegion,
};
use crate::raster::RasterImage;
use crate::render::{blend, compute_canvas, warp_image, Canvas};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpMode {
    Homography,
    Apap,
    Composite,
    #[default]
    Mesh,
}

impl FromStr for WarpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homography" => Ok(WarpMode::Homography),
            "apap" => Ok(WarpMode::Apap),
            "composite" => Ok(WarpMode::Composite),
            "mesh" => Ok(WarpMode::Mesh),
            _ => Err(Error::InvalidInput(format!("unknown warp mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for WarpMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WarpMode::Homography => "homography",
            WarpMode::Apap => "apap",
            WarpMode::Composite => "composite",
            WarpMode::Mesh => "mesh",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchConfig {
    pub mode: WarpMode,
    /// Mesh cell size in pixels.
    pub cell: f64,
    pub lambdas: Lambdas,
    pub apap_sigma: f64,
    pub apap_gamma: f64,
    /// Cross-line and salient-line sample spacing in pixels; half the cell
    /// size when unset.
    pub spacing: Option<f64>,
    pub ransac_threshold: f64,
    pub ransac_iterations: usize,
    pub seed: u64,
    pub anchor: AnchorRule,
    pub corners: CornerConfig,
    pub corner_match: CornerMatchConfig,
    pub segments: SegmentConfig,
    pub line_match: MatchConfig,
    pub lm: LmConfig,
    /// Minimum RANSAC inliers for an image pair to count as matched.
    pub min_pair_inliers: usize,
}

impl Default for StitchConfig {
    fn default() -> Self {
        StitchConfig {
            mode: WarpMode::Mesh,
            cell: 40.0,
            lambdas: Lambdas::default(),
            apap_sigma: 340.0,
            apap_gamma: 0.0025,
            spacing: None,
            ransac_threshold: 2.0,
            ransac_iterations: 1000,
            seed: 0,
            anchor: AnchorRule::Midpoint,
            corners: CornerConfig::default(),
            corner_match: CornerMatchConfig::default(),
            segments: SegmentConfig::default(),
            line_match: MatchConfig::default(),
            lm: LmConfig::default(),
            min_pair_inliers: 12,
        }
    }
}

impl StitchConfig {
    pub fn validate(&self) -> Result<()> {
        self.lambdas.validate()?;
        if !(self.cell > 0.0) || !(self.sample_spacing() > 0.0) {
            return Err(Error::InvalidInput(
                "cell size and spacing must be positive".into(),
            ));
        }
        self.apap().validate()
    }

    pub fn sample_spacing(&self) -> f64 {
        self.spacing.unwrap_or(self.cell / 2.0)
    }

    pub fn apap(&self) -> MovingDltConfig {
        MovingDltConfig {
            sigma: self.apap_sigma,
            gamma: self.apap_gamma,
            cell_size: self.cell,
            use_lines: true,
        }
    }
}

/// A target-to-reference point warp produced by one of the modes.
#[derive(Debug, Clone)]
pub enum PointWarp {
    Homography(Homography),
    Apap(LocalWarpField),
    Composite(Box<CompositeWarp>),
    Mesh { grid: MeshGrid, v: Vec<f64> },
}

impl PointWarp {
    pub fn apply(&self, p: Point2) -> Result<Point2> {
        match self {
            PointWarp::Homography(h) => h.apply(p),
            PointWarp::Apap(f) => f.eval(p),
            PointWarp::Composite(c) => c.apply(p),
            PointWarp::Mesh { grid, v } => grid.interpolate(v, p),
        }
    }
}

/// Everything a two-image run decided, for reports and debugging.
#[derive(Debug, Clone, Serialize)]
pub struct TwoImageDiagnostics {
    pub mode: WarpMode,
    pub prior: Homography,
    pub frame: Option<CrossLineFrame>,
    pub point_count: usize,
    pub line_count: usize,
    pub salient_count: usize,
    pub cross_sample_count: usize,
    pub energies: Option<EnergyBreakdown>,
    pub rmse: f64,
    pub fold_overs: usize,
    pub canvas: Canvas,
    pub timings_ms: BTreeMap<String, f64>,
}

/// A fitted two-image warp, before any rendering.
pub struct TwoImageAlignment {
    pub grid: MeshGrid,
    /// Target mesh vertices in reference coordinates.
    pub vertices: Vec<f64>,
    pub warp: PointWarp,
    pub cross: Option<CrossLineSamples>,
    pub salient: Vec<SalientLine>,
    pub diagnostics: TwoImageDiagnostics,
}

pub struct TwoImageResult {
    pub image: RasterImage,
    pub grid: MeshGrid,
    /// Target mesh vertices in reference coordinates.
    pub vertices: Vec<f64>,
    pub warp: PointWarp,
    pub cross: Option<CrossLineSamples>,
    pub salient: Vec<SalientLine>,
    pub diagnostics: TwoImageDiagnostics,
}

struct Timer(BTreeMap<String, f64>, Instant);

impl Timer {
    fn new() -> Self {
        Timer(BTreeMap::new(), Instant::now())
    }

    fn lap(&mut self, step: &str) {
        let now = Instant::now();
        self.0
            .insert(step.to_string(), (now - self.1).as_secs_f64() * 1e3);
        self.1 = now;
    }
}

/// Corner matches filtered by RANSAC, target `a` to reference `b`.
fn detect_point_pairs(
    a: &RasterImage,
    b: &RasterImage,
    cfg: &StitchConfig,
) -> Result<(Vec<PointPair>, Homography)> {
    let (ga, gb) = (a.to_gray(), b.to_gray());
    let ca = detect_corners(&ga, &cfg.corners);
    let cb = detect_corners(&gb, &cfg.corners);
    let matches = match_corners(&ga, &ca, &gb, &cb, &cfg.corner_match);
    let r = ransac_homography(
        &matches,
        cfg.ransac_threshold,
        cfg.ransac_iterations,
        cfg.seed,
    )?;
    Ok((r.inliers.iter().map(|&i| matches[i]).collect(), r.h))
}

/// Cross-line frame and samples for a target with prior `h`; `None` when the
/// prior has no projective part or the target lies inside the reference.
fn cross_terms(
    h: &Homography,
    rect: &Rect,
    omega: &OverlapMask,
    cfg: &StitchConfig,
) -> Result<Option<(CrossLineFrame, CrossLineSamples)>> {
    let region = match OverlapRegion::from_mask(omega) {
        Ok(r) => r,
        Err(e @ (Error::NoNonOverlap | Error::EmptyOverlap)) => {
            log::info!("no cross-line terms: {e}");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let frame = match select_frame_with(h, rect, &region, cfg.anchor) {
        Ok(f) => f,
        Err(e @ (Error::AffineWarp | Error::NoNonOverlap | Error::EmptyOverlap)) => {
            log::info!("no cross-line terms: {e}");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let samples = generate_cross_lines(&frame, rect, Some(omega), cfg.sample_spacing(), h)?;
    Ok(Some((frame, samples)))
}

fn salient_lines(
    img: &RasterImage,
    prior: &Homography,
    cfg: &StitchConfig,
) -> Result<Vec<SalientLine>> {
    let rect = Rect::of_size(img.width, img.height);
    let segs: Vec<_> = detect_segments(&img.to_gray(), &cfg.segments)
        .iter()
        .filter_map(|s| s.clip(&rect))
        .collect();
    sample_salient(&segs, cfg.sample_spacing(), cfg.segments.min_length, prior)
}

/// Fits the target-to-reference warp without rendering. Correspondences are
/// detected when not given: corners and RANSAC first, then lines matched
/// under that estimate.
pub fn align_two(
    target: &RasterImage,
    reference: &RasterImage,
    corr: Option<&CorrespondenceSet>,
    cfg: &StitchConfig,
) -> Result<TwoImageAlignment> {
    cfg.validate()?;
    let mut timer = Timer::new();
    let rect = Rect::of_size(target.width, target.height);
    let ref_rect = Rect::of_size(reference.width, reference.height);

    let (points, lines) = match corr {
        Some(c) => (
            c.point_pairs(),
            c.line_pairs().map_err(|e| e.in_step("features"))?,
        ),
        None => {
            let (points, h0) =
                detect_point_pairs(target, reference, cfg).map_err(|e| e.in_step("features"))?;
            let ta = detect_segments(&target.to_gray(), &cfg.segments);
            let tb = detect_segments(&reference.to_gray(), &cfg.segments);
            let lines = match_segments_indexed(&ta, &tb, &h0, &cfg.line_match)
                .into_iter()
                .map(|m| m.pair)
                .collect();
            (points, lines)
        }
    };
    timer.lap("features");

    let prior = estimate_dlt(&points, &lines).map_err(|e| e.in_step("prior"))?;
    timer.lap("prior");

    let omega = compute_omega(&prior, (target.width, target.height), &ref_rect)
        .map_err(|e| e.in_step("frame"))?;
    let cross = cross_terms(&prior, &rect, &omega, cfg).map_err(|e| e.in_step("frame"))?;
    let frame = cross.as_ref().map(|c| c.0);
    let cross = cross.map(|c| c.1);
    timer.lap("frame");

    let salient = if cfg.mode == WarpMode::Mesh {
        salient_lines(target, &prior, cfg).map_err(|e| e.in_step("salient"))?
    } else {
        Vec::new()
    };
    timer.lap("salient");

    let grid = build_grid(rect, cfg.cell).map_err(|e| e.in_step("sampling"))?;
    timer.lap("sampling");

    let (warp, energies) = match cfg.mode {
        WarpMode::Homography => (PointWarp::Homography(prior), None),
        WarpMode::Apap => {
            let field = fit_moving_dlt(&points, &lines, rect, &cfg.apap())
                .map_err(|e| e.in_step("solve"))?;
            (PointWarp::Apap(field), None)
        }
        WarpMode::Composite => {
            let field = fit_moving_dlt(&points, &lines, rect, &cfg.apap())
                .map_err(|e| e.in_step("solve"))?;
            match frame {
                Some(f) => {
                    let c = CompositeWarp::new(field, prior, f).map_err(|e| e.in_step("solve"))?;
                    (PointWarp::Composite(Box::new(c)), None)
                }
                None => (PointWarp::Apap(field), None),
            }
        }
        WarpMode::Mesh => {
            let terms = MeshTerms {
                points: &points,
                lines: &lines,
                cross: cross.as_ref(),
                salient: &salient,
            };
            let sys =
                build_system(&grid, &terms, cfg.lambdas, &prior).map_err(|e| e.in_step("solve"))?;
            let sol = solve(&sys).map_err(|e| e.in_step("solve"))?;
            let energies = sys.breakdown(&sol.v);
            (
                PointWarp::Mesh {
                    grid: grid.clone(),
                    v: sol.v,
                },
                Some(energies),
            )
        }
    };
    let vertices = match &warp {
        PointWarp::Mesh { v, .. } => v.clone(),
        w => {
            let mut v = Vec::with_capacity(2 * grid.n());
            for i in 0..grid.n() {
                let q = w.apply(grid.vertex(i)).map_err(|e| e.in_step("solve"))?;
                v.extend([q.x, q.y]);
            }
            v
        }
    };
    let fold_overs = grid.fold_overs(&vertices).len();
    if fold_overs > 0 {
        log::warn!("fold-over in {fold_overs} mesh cells");
    }
    timer.lap("solve");

    let rmse = if points.is_empty() {
        0.0
    } else {
        crate::eval::rmse(|p| warp.apply(p), &points).map_err(|e| e.in_step("solve"))?
    };

    let canvas = compute_canvas(&ref_rect, &[&vertices]).map_err(|e| e.in_step("render"))?;

    let diagnostics = TwoImageDiagnostics {
        mode: cfg.mode,
        prior,
        frame,
        point_count: points.len(),
        line_count: lines.len(),
        salient_count: salient.len(),
        cross_sample_count: cross.as_ref().map_or(0, |c| c.sample_count()),
        energies,
        rmse,
        fold_overs,
        canvas,
        timings_ms: timer.0,
    };
    Ok(TwoImageAlignment {
        grid,
        vertices,
        warp,
        cross,
        salient,
        diagnostics,
    })
}

/// Warps `target` onto `reference` and blends both into one panorama.
pub fn stitch_two(
    target: &RasterImage,
    reference: &RasterImage,
    corr: Option<&CorrespondenceSet>,
    cfg: &StitchConfig,
) -> Result<TwoImageResult> {
    let a = align_two(target, reference, corr, cfg)?;
    let start = Instant::now();
    let canvas = a.diagnostics.canvas;
    let ref_rect = Rect::of_size(reference.width, reference.height);
    let ref_grid = build_grid(ref_rect, cfg.cell).map_err(|e| e.in_step("render"))?;
    let base = warp_image(reference, &ref_grid, &ref_grid.vertices, &canvas)
        .map_err(|e| e.in_step("render"))?;
    let layer =
        warp_image(target, &a.grid, &a.vertices, &canvas).map_err(|e| e.in_step("render"))?;
    let image = blend(&[base, layer]).map_err(|e| e.in_step("render"))?;
    let mut diagnostics = a.diagnostics;
    diagnostics
        .timings_ms
        .insert("render".into(), start.elapsed().as_secs_f64() * 1e3);
    Ok(TwoImageResult {
        image,
        grid: a.grid,
        vertices: a.vertices,
        warp: a.warp,
        cross: a.cross,
        salient: a.salient,
        diagnostics,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiImageDiagnostics {
    pub reference: usize,
    pub identities: usize,
    pub line_identities: usize,
    pub bundle_energies: Vec<f64>,
    pub bundle_iterations: usize,
    pub bundle_termination: Termination,
    /// Reference-to-image homographies after bundle adjustment.
    pub homographies: Vec<Homography>,
    pub frames: Vec<Option<CrossLineFrame>>,
    pub fold_overs: Vec<usize>,
    pub canvas: Canvas,
    pub timings_ms: BTreeMap<String, f64>,
}

pub struct MultiImageResult {
    pub image: RasterImage,
    pub grids: Vec<MeshGrid>,
    /// Per-image mesh vertices in reference coordinates.
    pub vertices: Vec<Vec<f64>>,
    pub layers: Vec<RasterImage>,
    pub cross: Vec<Option<CrossLineSamples>>,
    pub salient: Vec<Vec<SalientLine>>,
    pub diagnostics: MultiImageDiagnostics,
}

impl MultiImageResult {
    /// Image `k` point in reference coordinates.
    pub fn map(&self, k: usize, p: Point2) -> Result<Point2> {
        self.grids[k].interpolate(&self.vertices[k], p)
    }
}

/// Pairwise corner and line matching over all image pairs, clustered into
/// identities.
pub fn detect_multi(images: &[RasterImage], cfg: &StitchConfig) -> Result<MultiCorrespondenceSet> {
    let grays: Vec<_> = images.iter().map(|i| i.to_gray()).collect();
    let features: Vec<ImageFeatures> = grays
        .iter()
        .map(|g| ImageFeatures {
            points: detect_corners(g, &cfg.corners),
            lines: detect_segments(g, &cfg.segments),
        })
        .collect();
    let mut matches = Vec::new();
    for a in 0..images.len() {
        for b in a + 1..images.len() {
            let (fa, fb) = (&features[a], &features[b]);
            let pairs = match_corners(
                &grays[a],
                &fa.points,
                &grays[b],
                &fb.points,
                &cfg.corner_match,
            );
            let Ok(r) = ransac_homography(
                &pairs,
                cfg.ransac_threshold,
                cfg.ransac_iterations,
                cfg.seed,
            ) else {
                continue;
            };
            if r.inliers.len() < cfg.min_pair_inliers {
                continue;
            }
            let index = |pts: &[Point2], q: Point2| pts.iter().position(|&c| c == q);
            let points = r
                .inliers
                .iter()
                .filter_map(|&i| {
                    Some((
                        index(&fa.points, pairs[i].p)?,
                        index(&fb.points, pairs[i].p_prime)?,
                    ))
                })
                .collect();
            let lines = match_segments_indexed(&fa.lines, &fb.lines, &r.h, &cfg.line_match)
                .into_iter()
                .map(|m| (m.target, m.reference))
                .collect();
            matches.push(PairMatches {
                a,
                b,
                points,
                lines,
            });
        }
    }
    cluster_matches(&features, &matches)
}

/// The image with the most matches, lowest index on ties.
pub fn pick_reference(set: &MultiCorrespondenceSet, images: usize) -> usize {
    let totals = MatchGraph::from_set(set, images).totals();
    let mut best = 0;
    for (k, &t) in totals.iter().enumerate() {
        if t > totals[best] {
            best = k;
        }
    }
    best
}

/// Stitches several images: reference choice, bundle adjustment, then one
/// joint solve for every mesh.
pub fn stitch_multi(
    images: &[RasterImage],
    corr: Option<&MultiCorrespondenceSet>,
    reference: Option<usize>,
    cfg: &StitchConfig,
) -> Result<MultiImageResult> {
    let k = images.len();
    if k < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least two images, got {k}"
        )));
    }
    if let Some(r) = reference {
        if r >= k {
            return Err(Error::InvalidInput(format!(
                "reference index {r} out of range for {k} images"
            )));
        }
    }
    cfg.validate()?;
    let mut timer = Timer::new();
    let detected;
    let set = match corr {
        Some(c) => {
            c.validate(k).map_err(|e| e.in_step("features"))?;
            c
        }
        None => {
            detected = detect_multi(images, cfg).map_err(|e| e.in_step("features"))?;
            &detected
        }
    };
    let reference = reference.unwrap_or_else(|| pick_reference(set, k));
    timer.lap("features");

    let problem = build_problem(set, k, reference).map_err(|e| e.in_step("bundle"))?;
    let report = lm_solve(&problem, &problem.init, &cfg.lm).map_err(|e| e.in_step("bundle"))?;
    let theta = report.theta.clone();
    timer.lap("bundle");

    let rects: Vec<Rect> = images
        .iter()
        .map(|i| Rect::of_size(i.width, i.height))
        .collect();
    let to_ref: Vec<Homography> = theta
        .h
        .iter()
        .map(|h| h.invert())
        .collect::<Result<_>>()
        .map_err(|e| e.in_step("frame"))?;
    let mut terms = Vec::with_capacity(k);
    let mut frames = Vec::with_capacity(k);
    for i in 0..k {
        let grid = build_grid(rects[i], cfg.cell).map_err(|e| e.in_step("sampling"))?;
        if i == reference {
            terms.push(ImageTerms {
                grid,
                cross: None,
                salient: Vec::new(),
            });
            frames.push(None);
            continue;
        }
        let footprints: Vec<(Homography, Rect)> = (0..k)
            .filter(|&j| j != i)
            .map(|j| Ok((theta.h[j].compose(&to_ref[i])?, rects[j])))
            .collect::<Result<_>>()
            .map_err(|e| e.in_step("frame"))?;
        let omega = OverlapMask::from_footprints(images[i].width, images[i].height, &footprints)
            .map_err(|e| e.in_step("frame"))?;
        let cross =
            cross_terms(&to_ref[i], &rects[i], &omega, cfg).map_err(|e| e.in_step("frame"))?;
        frames.push(cross.as_ref().map(|c| c.0));
        let salient =
            salient_lines(&images[i], &to_ref[i], cfg).map_err(|e| e.in_step("salient"))?;
        terms.push(ImageTerms {
            grid,
            cross: cross.map(|c| c.1),
            salient,
        });
    }
    timer.lap("sampling");

    let joint = JointConfig {
        lambdas: cfg.lambdas,
        ..JointConfig::default()
    };
    let sol = joint_solve(&terms, &problem, &theta, &joint).map_err(|e| e.in_step("solve"))?;
    let vertices: Vec<Vec<f64>> = sol.meshes.into_iter().map(|m| m.v).collect();
    let fold_overs: Vec<usize> = terms
        .iter()
        .zip(&vertices)
        .map(|(t, v)| t.grid.fold_overs(v).len())
        .collect();
    if fold_overs.iter().any(|&f| f > 0) {
        log::warn!("fold-over cells per image: {fold_overs:?}");
    }
    timer.lap("solve");

    let meshes: Vec<&[f64]> = vertices.iter().map(|v| v.as_slice()).collect();
    let canvas = compute_canvas(&rects[reference], &meshes).map_err(|e| e.in_step("render"))?;
    let layers = images
        .iter()
        .zip(&terms)
        .zip(&vertices)
        .map(|((img, t), v)| warp_image(img, &t.grid, v, &canvas))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_step("render"))?;
    let image = blend(&layers).map_err(|e| e.in_step("render"))?;
    timer.lap("render");

    let diagnostics = MultiImageDiagnostics {
        reference,
        identities: problem.points.len(),
        line_identities: problem.lines.len(),
        bundle_energies: report.energies,
        bundle_iterations: report.iterations,
        bundle_termination: report.termination,
        homographies: theta.h,
        frames,
        fold_overs,
        canvas,
        timings_ms: timer.0,
    };
    let (grids, cross, salient) =
        terms
            .into_iter()
            .fold((Vec::new(), Vec::new(), Vec::new()), |mut acc, t| {
                acc.0.push(t.grid);
                acc.1.push(t.cross);
                acc.2.push(t.salient);
                acc
            });
    Ok(MultiImageResult {
        image,
        grids,
        vertices,
        layers,
        cross,
        salient,
        diagnostics,
    })
}

/// SVG of the undeformed grid (gray), the deformed grid (blue), cross-lines
/// (red in the overlap, green outside it) and salient segments (orange), all
/// drawn in one shared coordinate frame.
pub fn mesh_svg(
    grid: &MeshGrid,
    v: &[f64],
    cross: Option<&CrossLineSamples>,
    salient: &[SalientLine],
) -> String {
    let mut pts: Vec<Point2> = (0..grid.n()).map(|i| grid.vertex(i)).collect();
    pts.extend(v.chunks(2).map(|c| Point2::new(c[0], c[1])));
    let (mut x0, mut y0, mut x1, mut y1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for p in pts.iter().filter(|p| p.is_finite()) {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let pad = 10.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{:.2} {:.2} {:.2} {:.2}">"#,
        x0 - pad,
        y0 - pad,
        x1 - x0 + 2.0 * pad,
        y1 - y0 + 2.0 * pad
    );
    let mut line = |a: Point2, b: Point2, color: &str| {
        let _ = writeln!(
            s,
            r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="{color}" stroke-width="0.8"/>"#,
            a.x, a.y, b.x, b.y
        );
    };
    let at = |vs: &[f64], i: usize| Point2::new(vs[2 * i], vs[2 * i + 1]);
    for (vs, color) in [(&grid.vertices[..], "gray"), (v, "blue")] {
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let i = grid.index(r, c);
                if c + 1 < grid.cols {
                    line(at(vs, i), at(vs, grid.index(r, c + 1)), color);
                }
                if r + 1 < grid.rows {
                    line(at(vs, i), at(vs, grid.index(r + 1, c)), color);
                }
            }
        }
    }
    if let Some(cross) = cross {
        for l in cross.u_lines.iter().chain(&cross.v_lines) {
            for i in 1..l.samples.len() {
                let color = if l.in_omega[i - 1] && l.in_omega[i] {
                    "green"
                } else {
                    "red"
                };
                line(l.samples[i - 1], l.samples[i], color);
            }
        }
    }
    for sl in salient {
        line(sl.segment.start, sl.segment.end, "orange");
    }
    s.push_str("</svg>\n");
    s
}

/// Held-out evaluation of one mode on a two-image correspondence set: fit on
/// a seeded half, measure on both halves.
pub fn evaluate_two(
    target: &RasterImage,
    reference: &RasterImage,
    corr: &CorrespondenceSet,
    cfg: &StitchConfig,
) -> Result<crate::eval::WarpMetrics> {
    let (train_pts, test_pts) = crate::eval::split_train_test(&corr.points, cfg.seed)?;
    let train = CorrespondenceSet {
        points: train_pts,
        lines: corr.lines.clone(),
    };
    let res = align_two(target, reference, Some(&train), cfg)?;
    let pairs = |c: &[crate::features::PointCorr]| -> Vec<PointPair> {
        c.iter().map(|p| PointPair::new(p.a, p.b)).collect()
    };
    let rmse_train = crate::eval::rmse(|p| res.warp.apply(p), &pairs(&train.points))?;
    let rmse_test = crate::eval::rmse(|p| res.warp.apply(p), &pairs(&test_pts))?;
    let ref_rect = Rect::of_size(reference.width, reference.height);
    let region: Vec<bool> = (0..target.width * target.height)
        .map(|i| {
            let p = Point2::new((i % target.width) as f64, (i / target.width) as f64);
            res.warp.apply(p).is_ok_and(|q| ref_rect.contains(q))
        })
        .collect();
    let outliers = match crate::eval::outlier_pct(
        |p| res.warp.apply(p),
        &target.to_gray(),
        &reference.to_gray(),
        &region,
    ) {
        Ok(v) => Some(v),
        Err(Error::EmptyOverlap | Error::InvalidInput(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(crate::eval::WarpMetrics {
        mode: cfg.mode.to_string(),
        rmse_train,
        rmse_test,
        outlier_pct: outliers,
    })
}

/// Runs `evaluate_two` on `reps` generated scenes, image 1 onto image 0.
/// Repetition `r` uses scene seed `spec.seed + r` and split seed `cfg.seed + r`.
pub fn evaluate_scene(
    spec: &crate::eval::SceneSpec,
    reps: usize,
    modes: &[WarpMode],
    cfg: &StitchConfig,
) -> Result<crate::eval::MetricReport> {
    use rayon::prelude::*;
    if reps == 0 || modes.is_empty() {
        return Err(Error::InvalidInput(
            "need at least one repetition and one mode".into(),
        ));
    }
    if spec.images < 2 {
        return Err(Error::InvalidInput("evaluation needs two images".into()));
    }
    let runs = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let s = crate::eval::generate_scene(&crate::eval::SceneSpec {
                seed: spec.seed + r,
                ..spec.clone()
            })?;
            let corr = s.pair(1, 0).0;
            modes
                .iter()
                .map(|&mode| {
                    let c = StitchConfig {
                        mode,
                        seed: cfg.seed + r,
                        ..cfg.clone()
                    };
                    evaluate_two(&s.images[1], &s.images[0], &corr, &c)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::eval::MetricReport::from_runs(runs))
}
