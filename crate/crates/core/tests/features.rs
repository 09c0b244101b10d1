use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spstitch::features::*;
use spstitch::geometry::*;
use spstitch::raster::GrayImage;

fn gray(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> f32) -> GrayImage {
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(f(x, y));
        }
    }
    GrayImage {
        width: w,
        height: h,
        data,
    }
}

/// Squares of 20 px; intersections sit between pixel centers at 20k − 0.5.
fn checkerboard() -> GrayImage {
    gray(200, 160, |x, y| {
        if ((x / 20) + (y / 20)) % 2 == 0 {
            40.0
        } else {
            210.0
        }
    })
}

fn textured(seed: u64, w: usize, h: usize) -> GrayImage {
    // Smooth random blobs: sum of a few Gaussian bumps plus fine noise.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..60)
        .map(|_| {
            (
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                rng.random_range(3.0..9.0),
                rng.random_range(-120.0..120.0),
            )
        })
        .collect();
    gray(w, h, |x, y| {
        let v: f64 = bumps
            .iter()
            .map(|&(cx, cy, s, a)| {
                a * (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * s * s)).exp()
            })
            .sum();
        (128.0 + v).clamp(0.0, 255.0) as f32
    })
}

#[test]
fn checkerboard_corners_are_found() {
    let corners = detect_corners(&checkerboard(), &CornerConfig::default());
    let truth: Vec<Point2> = (1..10)
        .flat_map(|i| {
            (1..8).map(move |j| Point2::new(20.0 * i as f64 - 0.5, 20.0 * j as f64 - 0.5))
        })
        .collect();
    let found = truth
        .iter()
        .filter(|t| corners.iter().any(|c| c.dist(**t) <= 1.0))
        .count();
    assert!(found * 100 >= truth.len() * 95, "{found}/{}", truth.len());
}

#[test]
fn corner_detection_is_deterministic() {
    let img = textured(1, 160, 120);
    let a = detect_corners(&img, &CornerConfig::default());
    assert!(!a.is_empty());
    assert_eq!(a, detect_corners(&img, &CornerConfig::default()));
}

#[test]
fn identical_images_match_themselves() {
    let img = textured(2, 160, 120);
    let c = detect_corners(&img, &CornerConfig::default());
    let m = match_corners(&img, &c, &img, &c, &CornerMatchConfig::default());
    let interior = c
        .iter()
        .filter(|p| {
            p.x.round() >= 5.0 && p.y.round() >= 5.0 && p.x.round() < 155.0 && p.y.round() < 115.0
        })
        .count();
    assert_eq!(m.len(), interior);
    assert!(m.iter().all(|p| p.p == p.p_prime));
}

#[test]
fn translation_is_recovered() {
    let a = textured(3, 200, 150);
    let b = gray(
        200,
        150,
        |x, y| if x >= 10 { a.get(x - 10, y) } else { 128.0 },
    );
    let cfg = CornerConfig::default();
    let ca = detect_corners(&a, &cfg);
    let cb = detect_corners(&b, &cfg);
    let m = match_corners(&a, &ca, &b, &cb, &CornerMatchConfig::default());
    assert!(m.len() > 10);
    let interior: Vec<&PointPair> = m.iter().filter(|p| p.p.x > 15.0 && p.p.x < 180.0).collect();
    let good = interior
        .iter()
        .filter(|p| (p.p_prime - p.p - Point2::new(10.0, 0.0)).norm() <= 1.0)
        .count();
    assert_eq!(good, interior.len());
}

#[test]
fn unrelated_noise_rarely_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = gray(160, 120, |_, _| rng.random_range(0.0..255.0));
    let b = gray(160, 120, |_, _| rng.random_range(0.0..255.0));
    let cfg = CornerConfig::default();
    let ca = detect_corners(&a, &cfg);
    let cb = detect_corners(&b, &cfg);
    let m = match_corners(&a, &ca, &b, &cb, &CornerMatchConfig::default());
    assert!(
        m.len() * 20 < ca.len().max(1),
        "{} of {}",
        m.len(),
        ca.len()
    );
}

fn ground_truth() -> Homography {
    Homography::from_params([1.02, 0.04, 15.0, -0.03, 0.98, -8.0, 1.5e-4, -1e-4]).unwrap()
}

#[test]
fn ransac_exact_pairs() {
    let h = ground_truth();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pairs: Vec<PointPair> = (0..40)
        .map(|_| {
            let p = Point2::new(rng.random_range(0.0..400.0), rng.random_range(0.0..300.0));
            PointPair::new(p, h.apply(p).unwrap())
        })
        .collect();
    let r = ransac_homography(&pairs, 2.0, 200, 9).unwrap();
    assert_eq!(r.inliers, (0..40).collect::<Vec<_>>());
    assert!(r.h.param_distance(&h) < 1e-6);
}

#[test]
fn ransac_separates_planted_outliers() {
    let h = ground_truth();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut pairs = Vec::new();
        let mut truth = Vec::new();
        for i in 0..100 {
            let p = Point2::new(rng.random_range(0.0..400.0), rng.random_range(0.0..300.0));
            let exact = h.apply(p).unwrap();
            if i % 10 < 7 {
                truth.push(i);
                pairs.push(PointPair::new(p, exact));
            } else {
                let q = loop {
                    let q = Point2::new(rng.random_range(0.0..450.0), rng.random_range(0.0..330.0));
                    if q.dist(exact) >= 10.0 {
                        break q;
                    }
                };
                pairs.push(PointPair::new(p, q));
            }
        }
        let r = ransac_homography(&pairs, 2.0, 500, seed).unwrap();
        assert_eq!(r.inliers, truth, "seed {seed}");
        // Same seed, same answer.
        assert_eq!(ransac_homography(&pairs, 2.0, 500, seed).unwrap(), r);
    }
}

#[test]
fn refit_is_no_worse_than_minimal_model() {
    let h = ground_truth();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pairs: Vec<PointPair> = (0..60)
        .map(|_| {
            let p = Point2::new(rng.random_range(0.0..400.0), rng.random_range(0.0..300.0));
            let n = Point2::new(rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7));
            PointPair::new(p, h.apply(p).unwrap() + n)
        })
        .collect();
    let r = ransac_homography(&pairs, 3.0, 300, 1).unwrap();
    let inv = r.h.invert().unwrap();
    let err: f64 = r
        .inliers
        .iter()
        .map(|&i| symmetric_transfer_error(&r.h, &inv, &pairs[i]))
        .sum::<f64>()
        / r.inliers.len() as f64;
    // Every 4-subset model of the same inliers does at least as badly on average.
    for k in 0..20 {
        let s: Vec<PointPair> = (0..4)
            .map(|j| pairs[r.inliers[(k * 7 + j * 13) % r.inliers.len()]])
            .collect();
        if let Ok(m) = estimate_dlt(&s, &[]) {
            let mi = m.invert().unwrap();
            let e: f64 = r
                .inliers
                .iter()
                .map(|&i| symmetric_transfer_error(&m, &mi, &pairs[i]))
                .sum::<f64>()
                / r.inliers.len() as f64;
            assert!(err <= e + 1e-9);
        }
    }
}
