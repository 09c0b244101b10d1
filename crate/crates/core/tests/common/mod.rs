//! Helpers shared by several test targets.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spstitch::geometry::*;
use spstitch::linework::*;
use spstitch::meshwarp::*;
use spstitch::quasihomography::{select_frame, OverlapRegion};
use spstitch::raster::{GrayImage, RasterImage};

pub fn rand_point(rng: &mut ChaCha8Rng, r: &Rect) -> Point2 {
    Point2::new(rng.random_range(r.x..r.x1()), rng.random_range(r.y..r.y1()))
}

pub fn cross_line(samples: Vec<Point2>, in_omega: Vec<bool>, normal: Point2) -> CrossLine {
    CrossLine {
        line: LineEq::through(samples[0], *samples.last().unwrap()).unwrap(),
        samples,
        in_omega,
        normal: normal.normalized(),
    }
}

pub fn jitter(rng: &mut ChaCha8Rng, p: Point2) -> Point2 {
    p + Point2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))
}

/// A random mix of every term on a small grid.
pub fn random_system(rng: &mut ChaCha8Rng, grid: &MeshGrid, lambdas: Lambdas) -> EnergySystem {
    random_system_with(rng, grid, lambdas, false)
}

/// With `pinned`, every vertex also gets a jittered alignment pair so the
/// unregularized rows have full column rank.
pub fn random_system_with(
    rng: &mut ChaCha8Rng,
    grid: &MeshGrid,
    lambdas: Lambdas,
    pinned: bool,
) -> EnergySystem {
    let r = grid.rect;
    let mut pairs: Vec<PointPair> = (0..rng.random_range(0..8))
        .map(|_| {
            let p = rand_point(rng, &r);
            PointPair::new(p, jitter(rng, p))
        })
        .collect();
    if pinned {
        for i in 0..grid.n() {
            let v = grid.vertex(i);
            pairs.push(PointPair::new(v, jitter(rng, v)));
        }
    }
    let lines: Vec<LinePair> = (0..rng.random_range(0..4))
        .filter_map(|_| {
            let a = rand_point(rng, &r);
            let b = rand_point(rng, &r);
            let seg = LineSegment::new(a, b).ok()?;
            let line = LineEq::through(jitter(rng, a), jitter(rng, b)).ok()?;
            Some(LinePair { seg, line })
        })
        .collect();
    let mut cross = CrossLineSamples::default();
    for _ in 0..rng.random_range(0..3) {
        let k = rng.random_range(2..6);
        let s: Vec<Point2> = (0..k).map(|_| rand_point(rng, &r)).collect();
        let om: Vec<bool> = (0..k).map(|_| rng.random_bool(0.7)).collect();
        cross
            .u_lines
            .push(cross_line(s, om, Point2::new(rng.random(), 1.0)));
    }
    for _ in 0..rng.random_range(0..3) {
        let k = rng.random_range(3..6);
        let s: Vec<Point2> = (0..k).map(|_| rand_point(rng, &r)).collect();
        cross.v_lines.push(cross_line(
            s,
            vec![false; k],
            Point2::new(1.0, rng.random()),
        ));
    }
    let salient: Vec<SalientLine> = (0..rng.random_range(0..3))
        .map(|_| {
            let a = rand_point(rng, &r);
            let b = rand_point(rng, &r);
            let seg = LineSegment::new(a, b).unwrap();
            SalientLine {
                segment: seg,
                samples: seg.sample(rng.random_range(2..5)),
                normal: Point2::new(rng.random_range(-1.0..1.0), 1.0).normalized(),
            }
        })
        .collect();
    let prior = Homography::from_params([1.0, 0.01, 3.0, -0.02, 1.0, -2.0, 1e-4, 0.0]).unwrap();
    let terms = MeshTerms {
        points: &pairs,
        lines: &lines,
        cross: Some(&cross),
        salient: &salient,
    };
    build_system(grid, &terms, lambdas, &prior).unwrap()
}

pub fn dense_solve(sys: &EnergySystem) -> DVector<f64> {
    let m = sys.rows.len();
    let mut a = DMatrix::zeros(m, sys.unknowns);
    let mut b = DVector::zeros(m);
    for (k, row) in sys.rows.iter().enumerate() {
        for &(i, c) in &row.coeffs {
            a[(k, i)] += row.weight * c;
        }
        b[k] = row.weight * row.rhs;
    }
    let n = a.transpose() * &a;
    let rhs = a.transpose() * b;
    n.lu().solve(&rhs).unwrap()
}

/// Scene where every constraint is generated by `h` with samples on grid lines.
pub fn prior_consistent_system(h: &Homography) -> (MeshGrid, EnergySystem) {
    let rect = Rect::of_size(400, 320);
    let grid = build_grid(rect, 40.0).unwrap();
    let pairs: Vec<PointPair> = (0..grid.n())
        .step_by(3)
        .map(|i| PointPair::new(grid.vertex(i), h.apply(grid.vertex(i)).unwrap()))
        .collect();
    let lines: Vec<LinePair> = [(0usize, 0usize, 3usize, 2usize), (5, 1, 5, 7), (2, 9, 8, 4)]
        .iter()
        .map(|&(r0, c0, r1, c1)| {
            let a = grid.vertex(grid.index(r0, c0));
            let b = grid.vertex(grid.index(r1, c1));
            LinePair {
                seg: LineSegment::new(a, b).unwrap(),
                line: LineEq::through(h.apply(a).unwrap(), h.apply(b).unwrap()).unwrap(),
            }
        })
        .collect();
    let overlap =
        OverlapRegion::from_polygon(&rect, &Rect::new(0.0, 0.0, 200.0, 320.0).corners()).unwrap();
    let frame = select_frame(h, &rect, &overlap).unwrap();
    let mut omega = compute_omega(h, (400, 320), &Rect::of_size(200, 320)).unwrap();
    // Keep Ω on the right half so every u-line has a run of samples in it.
    for y in 0..320 {
        for x in 0..400 {
            omega.bits[y * 400 + x] = x >= 200;
        }
    }
    let cross = generate_cross_lines(&frame, &rect, Some(&omega), 40.0, h).unwrap();
    let segs = [
        LineSegment::new(Point2::new(40.0, 80.0), Point2::new(360.0, 80.0)).unwrap(),
        LineSegment::new(Point2::new(120.0, 0.0), Point2::new(120.0, 280.0)).unwrap(),
    ];
    let salient = sample_salient(&segs, 13.0, 20.0, h).unwrap();
    let terms = MeshTerms {
        points: &pairs,
        lines: &lines,
        cross: Some(&cross),
        salient: &salient,
    };
    let sys = build_system(&grid, &terms, Lambdas::default(), h).unwrap();
    (grid, sys)
}

pub fn random_projective(rng: &mut ChaCha8Rng) -> Homography {
    loop {
        let h7: f64 = rng.random_range(-1e-3..1e-3);
        let h8: f64 = rng.random_range(-1e-3..1e-3);
        if h7.abs().max(h8.abs()) < 2e-4 {
            continue;
        }
        if let Ok(h) = Homography::from_params([
            rng.random_range(0.8..1.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-40.0..40.0),
            rng.random_range(-0.2..0.2),
            rng.random_range(0.8..1.2),
            rng.random_range(-40.0..40.0),
            h7,
            h8,
        ]) {
            return h;
        }
    }
}

pub fn textured(w: usize, h: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage {
        width: w,
        height: h,
        data: (0..w * h)
            .map(|_| rng.random_range(30.0..200.0f32).round())
            .collect(),
    }
}

pub fn smooth(w: usize, h: usize) -> RasterImage {
    RasterImage::from_fn(w, h, 3, |x, y, c| {
        let (x, y) = (x as f64, y as f64);
        (128.0
            + 60.0 * (x / 9.0 + c as f64).sin() * (y / 13.0).cos()
            + 30.0 * ((x + y) / 21.0).sin())
        .round() as u8
    })
    .unwrap()
}
