use spstitch::geometry::*;
use spstitch::linework::*;
use spstitch::quasihomography::{select_frame, OverlapRegion};
use spstitch::raster::{GrayImage, RasterImage};

fn gray(w: usize, h: usize, f: impl Fn(f64, f64) -> f32) -> GrayImage {
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(f(x as f64, y as f64));
        }
    }
    GrayImage {
        width: w,
        height: h,
        data,
    }
}

/// Filled boxes at distinct gray levels; straight edges everywhere.
fn boxes(x: f64, y: f64) -> f32 {
    let inside = |x0: f64, y0: f64, x1: f64, y1: f64| x >= x0 && x < x1 && y >= y0 && y < y1;
    if inside(40.0, 30.0, 150.0, 120.0) {
        200.0
    } else if inside(190.0, 60.0, 330.0, 200.0) {
        60.0
    } else if inside(80.0, 160.0, 170.0, 250.0) {
        150.0
    } else {
        110.0
    }
}

#[test]
fn single_step_edge_gives_one_segment() {
    let img = gray(300, 200, |x, _| if x < 150.0 { 0.0 } else { 255.0 });
    let segs = detect_segments(&img, &SegmentConfig::default());
    assert_eq!(segs.len(), 1, "{segs:?}");
    let s = segs[0];
    let (top, bottom) = if s.start.y < s.end.y {
        (s.start, s.end)
    } else {
        (s.end, s.start)
    };
    assert!(top.dist(Point2::new(149.5, 0.0)) < 2.0, "{top:?}");
    assert!(bottom.dist(Point2::new(149.5, 199.0)) < 2.0, "{bottom:?}");
    let angle = s.direction().x.abs().asin().to_degrees();
    assert!(angle < 1.0);
}

#[test]
fn circle_yields_bounded_pieces() {
    let r = 80.0;
    let img = gray(240, 240, |x, y| {
        if (x - 120.0).hypot(y - 120.0) < r {
            220.0
        } else {
            30.0
        }
    });
    let cfg = SegmentConfig::default();
    let segs = detect_segments(&img, &cfg);
    // Orientation agreement within the tolerance caps each piece at the chord
    // subtending that much arc.
    let chord = 2.0 * r * (cfg.angle_tolerance_deg.to_radians() / 2.0).sin();
    for s in &segs {
        assert!(s.length() >= cfg.min_length);
        assert!(s.length() <= chord + 2.0, "{} > {chord}", s.length());
    }
}

#[test]
fn detection_is_deterministic() {
    let img = gray(360, 280, boxes);
    let a = detect_segments(&img, &SegmentConfig::default());
    let b = detect_segments(&img, &SegmentConfig::default());
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn identical_images_match_each_segment_to_itself() {
    let img = gray(360, 280, boxes);
    let segs = detect_segments(&img, &SegmentConfig::default());
    let matches = match_segments_indexed(
        &segs,
        &segs,
        &Homography::identity(),
        &MatchConfig::default(),
    );
    assert_eq!(matches.len(), segs.len());
    for m in matches {
        assert_eq!(m.target, m.reference);
    }
}

#[test]
fn warped_pair_matches_mostly_correctly() {
    let h = Homography::from_params([0.97, 0.05, 12.0, -0.04, 1.01, 8.0, 1e-4, -5e-5]).unwrap();
    let inv = h.invert().unwrap();
    let target = gray(360, 280, boxes);
    let reference = gray(380, 300, |x, y| {
        let p = inv.apply(Point2::new(x, y)).unwrap();
        boxes(p.x, p.y)
    });
    let ts = detect_segments(&target, &SegmentConfig::default());
    let rs = detect_segments(&reference, &SegmentConfig::default());
    let matches = match_segments_indexed(&ts, &rs, &h, &MatchConfig::default());
    assert!(matches.len() >= 6, "{}", matches.len());
    // Ground truth: the reference segment must contain the image of the target midpoint.
    let correct = matches
        .iter()
        .filter(|m| {
            let mid = h.apply(ts[m.target].midpoint()).unwrap();
            let r = rs[m.reference];
            let t = (mid - r.start).dot(r.direction());
            r.line().unwrap().signed_distance(mid).abs() < 2.0 && t > -2.0 && t < r.length() + 2.0
        })
        .count();
    assert!(
        correct * 10 >= matches.len() * 8,
        "{correct}/{}",
        matches.len()
    );
}

#[test]
fn disjoint_scenes_do_not_match() {
    let target = gray(300, 200, |x, _| if x < 150.0 { 0.0 } else { 255.0 });
    let reference = gray(300, 200, |_, y| if y < 100.0 { 0.0 } else { 255.0 });
    let ts = detect_segments(&target, &SegmentConfig::default());
    let rs = detect_segments(&reference, &SegmentConfig::default());
    assert!(!ts.is_empty() && !rs.is_empty());
    assert!(match_segments(&ts, &rs, &Homography::identity()).is_empty());
}

#[test]
fn cross_line_layout() {
    // Vertical k1 with the overlap on the left: vertical v-lines, horizontal u-lines.
    let h = Homography::from_params([1.0, 0.0, -150.0, 0.0, 1.0, 0.0, -4e-4, 0.0]).unwrap();
    let rect = Rect::of_size(400, 400);
    let overlap =
        OverlapRegion::from_polygon(&rect, &Rect::new(0.0, 0.0, 200.0, 400.0).corners()).unwrap();
    let frame = select_frame(&h, &rect, &overlap).unwrap();
    let lines = generate_cross_lines(&frame, &rect, None, 40.0, &h).unwrap();
    assert_eq!(lines.u_lines.len(), 11);
    assert_eq!(lines.v_lines.len(), 11);
    for l in lines.u_lines.iter().chain(&lines.v_lines) {
        assert_eq!(l.samples.len(), 11);
        for w in l.samples.windows(2) {
            assert!((w[0].dist(w[1]) - 40.0).abs() < 1e-9);
        }
        for &p in &l.samples {
            assert!(l.line.signed_distance(p).abs() < 1e-9);
            assert!(rect.contains_closed(p, 1e-9));
        }
        assert!(l.in_omega.iter().all(|&b| !b));
    }
    for l in &lines.v_lines {
        assert!(l.line.a.abs() > 1.0 - 1e-12, "v-lines follow k1");
    }
    for l in &lines.u_lines {
        assert!(l.line.b.abs() > 1.0 - 1e-12, "u-lines follow k2");
    }
}

#[test]
fn cross_lines_tilted_frame_stay_inside() {
    let h = Homography::from_params([1.0, 0.05, -120.0, 0.02, 1.0, 4.0, -3e-4, 2e-4]).unwrap();
    let rect = Rect::of_size(320, 240);
    let omega = compute_omega(&h, (320, 240), &rect).unwrap();
    let overlap = OverlapRegion::from_mask(&omega).unwrap();
    let frame = select_frame(&h, &rect, &overlap).unwrap();
    let lines = generate_cross_lines(&frame, &rect, Some(&omega), 20.0, &h).unwrap();
    assert!(lines.sample_count() > 0);
    for (fam, slope) in [(&lines.u_lines, frame.k2), (&lines.v_lines, frame.k1)] {
        for l in fam.iter() {
            assert!(l.line.direction().cross(slope.direction()).abs() < 1e-9);
            for (&p, &flag) in l.samples.iter().zip(&l.in_omega) {
                assert!(rect.contains_closed(p, 1e-9));
                assert_eq!(flag, omega.contains_point(p));
            }
        }
    }
}

#[test]
fn omega_matches_per_pixel_brute_force() {
    let h = Homography::from_params([0.9, 0.1, -60.0, -0.05, 1.1, 20.0, 2e-4, 3e-4]).unwrap();
    let (w, hh) = (120, 90);
    let ref_rect = Rect::of_size(100, 80);
    let mask = compute_omega(&h, (w, hh), &ref_rect).unwrap();
    let m = h.matrix();
    for y in 0..hh {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let den = m[(2, 0)] * xf + m[(2, 1)] * yf + m[(2, 2)];
            let u = (m[(0, 0)] * xf + m[(0, 1)] * yf + m[(0, 2)]) / den;
            let v = (m[(1, 0)] * xf + m[(1, 1)] * yf + m[(1, 2)]) / den;
            let inside = den > 0.0 && (0.0..100.0).contains(&u) && (0.0..80.0).contains(&v);
            assert_eq!(mask.get(x, y), !inside, "({x},{y})");
        }
    }
}

#[test]
fn raster_to_gray_feeds_detector() {
    let img = RasterImage::from_fn(
        200,
        120,
        3,
        |x, _, c| if x < 100 { 10 } else { 240 - c as u8 },
    )
    .unwrap();
    let segs = detect_segments(&img.to_gray(), &SegmentConfig::default());
    assert_eq!(segs.len(), 1);
}
