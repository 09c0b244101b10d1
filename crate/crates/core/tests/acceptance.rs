//! Acceptance suite: one line per criterion, then a single overall verdict.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spstitch::bundle::{build_problem, lm_solve, BundleProblem, LmConfig, Theta};
use spstitch::eval::{generate_scene, outlier_pct, rmse, SceneSpec, SyntheticScene};
use spstitch::geometry::*;
use spstitch::meshwarp::*;
use spstitch::pipeline::{
    align_two, evaluate_scene, stitch_multi, stitch_two, StitchConfig, WarpMode,
};
use spstitch::quasihomography::*;
use spstitch::raster::{GrayImage, RasterImage};
use spstitch::render::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let w = 40.0 * rng.random_range(1..5) as f64;
        let h = 40.0 * rng.random_range(1..5) as f64;
        let grid = build_grid(Rect::new(0.0, 0.0, w, h), 40.0).map_err(|e| e.to_string())?;
        let sys = random_system_with(&mut rng, &grid, Lambdas::default(), true);
        let sol = solve(&sys).map_err(|e| format!("trial {trial}: {e}"))?;
        let x = dense_solve(&sys);
        let diff = sol
            .v
            .iter()
            .zip(x.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(diff / x.norm());
    }
    let secs = start.elapsed().as_secs_f64();
    let msg = format!("max relative difference {worst:.2e} over 50 systems in {secs:.2} s");
    ensure(worst <= 1e-8 && secs < 10.0, msg.clone())?;
    Ok(msg)
}

fn invariant_slope_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let (mut var_max, mut formula_err, mut ortho_err) = (0.0f64, 0.0f64, 0.0f64);
    let rect = Rect::new(0.0, 0.0, 400.0, 300.0);
    let overlap =
        OverlapRegion::from_polygon(&rect, &Rect::new(0.0, 0.0, 220.0, 300.0).corners()).unwrap();
    for _ in 0..100 {
        let h = random_projective(&mut rng);
        let [h1, h2, _, h4, h5, _, h7, h8] = h.h;
        let k1 = Slope::from_value(-h7 / h8);
        let expected = (h4 * h8 - h5 * h7) / (h1 * h8 - h2 * h7);
        let s: Vec<f64> = (0..50)
            .map(|_| {
                let p = Point2::new(rng.random_range(0.0..400.0), rng.random_range(0.0..300.0));
                slope_transfer(&h, p, k1)
                    .ok()
                    .and_then(|s| s.value())
                    .unwrap_or(f64::NAN)
            })
            .collect();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64;
        var_max = var_max.max(var);
        formula_err = formula_err.max(s.iter().map(|v| (v - expected).abs()).fold(0.0, f64::max));
        let f = select_frame(&h, &rect, &overlap).map_err(|e| e.to_string())?;
        let (a, b) = (
            f.s1.value().unwrap_or(f64::NAN),
            f.s2.value().unwrap_or(f64::NAN),
        );
        ortho_err = ortho_err.max((a * b + 1.0).abs());
    }
    let msg = format!(
        "slope variance {var_max:.1e}, formula error {formula_err:.1e}, s1*s2+1 {ortho_err:.1e}"
    );
    ensure(
        var_max < 1e-16 && formula_err < 1e-9 && ortho_err < 1e-9,
        msg.clone(),
    )?;
    Ok(msg)
}

fn qh_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let rect = Rect::new(0.0, 0.0, 400.0, 300.0);
    let overlap =
        OverlapRegion::from_polygon(&rect, &Rect::new(0.0, 0.0, 220.0, 300.0).corners()).unwrap();
    let (mut residual, mut second, mut anchor) = (0.0f64, 0.0f64, 0.0f64);
    let mut exact = 0;
    for _ in 0..100 {
        let h = random_projective(&mut rng);
        let f = select_frame(&h, &rect, &overlap).map_err(|e| e.to_string())?;
        let qh = QuasiHomography::new(h, f).map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let p = Point2::new(rng.random_range(0.0..400.0), rng.random_range(0.0..300.0));
            let q = qh.apply(p).map_err(|e| e.to_string())?;
            let (r1, r2) = qh
                .constraint_lines(p)
                .map_err(|e| e.to_string())?
                .residuals(q);
            residual = residual.max(r1.abs()).max(r2.abs());
            let d = rng.random_range(5.0..60.0) * f.k1.direction();
            let a = qh_warp(&h, &f, p).unwrap();
            let b = qh_warp(&h, &f, p + d).unwrap();
            let c = qh_warp(&h, &f, p + 2.0 * d).unwrap();
            second = second.max((a + c - 2.0 * b).norm());
        }
        let q = qh_warp(&h, &f, f.anchor).map_err(|e| e.to_string())?;
        let hq = h.apply(f.anchor).map_err(|e| e.to_string())?;
        anchor = anchor.max(q.dist(hq) / hq.norm());
        exact += usize::from(q == hq);
    }
    let msg = format!(
        "constraint residual {residual:.1e}, second difference {second:.1e}, anchor relative error {anchor:.1e} ({exact}/100 bit-exact)"
    );
    ensure(
        residual < 1e-9 && second < 1e-8 && anchor <= 1e-12,
        msg.clone(),
    )?;
    Ok(msg)
}

fn energy_at_prior() -> Outcome {
    let projective =
        Homography::from_params([1.0, 0.05, -180.0, 0.02, 1.0, 5.0, 6e-4, 0.0]).unwrap();
    let (grid, sys) = prior_consistent_system(&projective);
    let hv = grid.map_vertices(&projective).map_err(|e| e.to_string())?;
    let e = sys.breakdown(&hv);
    let rest = e.alignment + e.naturalness + e.perspective + e.saliency;
    let similarity = Homography::similarity(1.1, 0.1, 30.0, -20.0);
    let sv = grid.map_vertices(&similarity).map_err(|e| e.to_string())?;
    let sim_pj: f64 = sys
        .rows
        .iter()
        .filter(|r| r.term == Term::Projective)
        .map(|r| r.residual(&sv).powi(2))
        .sum();
    let msg = format!(
        "non-projective energy {rest:.1e}, projective {:.3e} at projective H, {sim_pj:.1e} at a similarity",
        e.projective
    );
    ensure(
        rest < 1e-12 && e.projective > 0.0 && sim_pj < 1e-12,
        msg.clone(),
    )?;
    Ok(msg)
}

fn two_plane_scene(seed: u64) -> SyntheticScene {
    generate_scene(&SceneSpec {
        planes: 2,
        noise: 0.5,
        seed,
        ..SceneSpec::default()
    })
    .unwrap()
}

fn saliency_tradeoff() -> Outcome {
    let s = two_plane_scene(0);
    let corr = s.pair(1, 0).0;
    let mut rows = Vec::new();
    for ls in [0.0, 5.0, 5000.0] {
        let cfg = StitchConfig {
            lambdas: Lambdas {
                s: ls,
                ..Lambdas::default()
            },
            ..StitchConfig::default()
        };
        let a =
            align_two(&s.images[1], &s.images[0], Some(&corr), &cfg).map_err(|e| e.to_string())?;
        let e = a.diagnostics.energies.ok_or("no energies")?;
        rows.push((ls, e.saliency, e.projective, a.diagnostics.salient_count));
    }
    let msg = rows
        .iter()
        .map(|(l, es, ep, n)| format!("λs={l}: Es={es:.4e} Epj={ep:.4e} ({n} lines)"))
        .collect::<Vec<_>>()
        .join("; ");
    let es_ok = rows.windows(2).all(|w| w[1].1 <= w[0].1 * (1.0 + 1e-9));
    let ep_ok = rows.windows(2).all(|w| w[1].2 >= w[0].2 * (1.0 - 1e-9));
    ensure(rows[0].3 > 0 && es_ok && ep_ok, msg.clone())?;
    Ok(msg)
}

fn warp_quality_ordering() -> Outcome {
    let start = Instant::now();
    let spec = SceneSpec {
        planes: 2,
        noise: 0.5,
        ..SceneSpec::default()
    };
    let modes = [WarpMode::Homography, WarpMode::Apap, WarpMode::Mesh];
    let report =
        evaluate_scene(&spec, 20, &modes, &StitchConfig::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let ordered = report
        .runs
        .iter()
        .filter(|r| {
            r[2].rmse_train <= 1.05 * r[1].rmse_train && r[1].rmse_train <= 1.05 * r[0].rmse_train
        })
        .count();
    let gap_ok = report.mean.iter().all(|m| m.rmse_test >= m.rmse_train);
    let means = report
        .mean
        .iter()
        .map(|m| format!("{} {:.3}/{:.3}", m.mode, m.rmse_train, m.rmse_test))
        .collect::<Vec<_>>()
        .join(", ");
    let msg = format!("ordered on {ordered}/20 seeds; mean train/test {means}; {secs:.1} s");
    ensure(ordered > 10 && gap_ok && secs < 120.0, msg.clone())?;
    Ok(msg)
}

fn bundle_spec(seed: u64, noise: f64) -> SceneSpec {
    SceneSpec {
        planes: 1,
        images: 3,
        noise,
        seed,
        width: 320,
        height: 240,
        focal: 280.0,
        points_per_image: 40,
        lines_per_plane: 10,
        ..SceneSpec::default()
    }
}

fn perturbed(t: &Theta, p: &BundleProblem, seed: u64) -> Theta {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = p
        .to_vector(t)
        .iter()
        .map(|x| x * (1.0 + 0.01 * rng.random_range(-1.0..1.0)))
        .collect();
    p.from_vector(&v)
}

fn bundle_recovery() -> Outcome {
    let scene = generate_scene(&bundle_spec(8, 0.0)).map_err(|e| e.to_string())?;
    let p = build_problem(&scene.correspondences.clean, 3, 0).map_err(|e| e.to_string())?;
    let h: Vec<Homography> = (0..3).map(|k| scene.homography(0, 0, k).unwrap()).collect();
    let inv: Vec<Homography> = h.iter().map(|m| m.invert().unwrap()).collect();
    let x = p
        .points
        .iter()
        .map(|pt| inv[pt.obs[0].0].apply(pt.obs[0].1).unwrap())
        .collect();
    let y = p
        .lines
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let (k, s) = l.obs[0];
            let (a, b) = (inv[k].apply(s.start).unwrap(), inv[k].apply(s.end).unwrap());
            if (b - a).dot(p.init.y[j][1] - p.init.y[j][0]) < 0.0 {
                [b, a]
            } else {
                [a, b]
            }
        })
        .collect();
    let start = perturbed(&Theta { h: h.clone(), x, y }, &p, 8);
    let rep = lm_solve(&p, &start, &LmConfig::default()).map_err(|e| e.to_string())?;
    let monotone = rep.energies.windows(2).all(|w| w[1] <= w[0]);
    let (mut sum, mut n) = (0.0, 0usize);
    for pt in &p.points {
        for &(k, o) in &pt.obs {
            let q = inv[k].apply(o).unwrap();
            sum += rep.theta.h[k].apply(q).unwrap().dist(o);
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let noisy_scene = generate_scene(&SceneSpec {
        points_per_image: 8,
        lines_per_plane: 6,
        ..bundle_spec(7, 0.5)
    })
    .map_err(|e| e.to_string())?;
    let np = build_problem(&noisy_scene.correspondences.noisy, 3, 0).map_err(|e| e.to_string())?;
    let jac = np.jacobian_check(&perturbed(&np.init, &np, 7));
    let msg = format!(
        "mean reprojection {mean:.1e} px after {} iterations, energies monotone {monotone}, Jacobian relative difference {jac:.1e}",
        rep.iterations
    );
    ensure(mean < 1e-6 && monotone && jac < 1e-5, msg.clone())?;
    Ok(msg)
}

fn metric_fidelity() -> Outcome {
    let r = rmse(
        Ok,
        &[PointPair::new(Point2::new(0.0, 0.0), Point2::new(3.0, 4.0))],
    )
    .map_err(|e| e.to_string())?;
    let a = textured(60, 40, 1);
    let all = vec![true; 60 * 40];
    let id = |p: Point2| Ok(p);
    let same = outlier_pct(id, &a, &a, &all).map_err(|e| e.to_string())?;
    let ramp = GrayImage {
        data: (0..60 * 40).map(|i| 50.0 + (i % 60) as f32 * 0.5).collect(),
        ..a.clone()
    };
    let brighter = GrayImage {
        data: ramp.data.iter().map(|v| v + 20.0).collect(),
        ..a.clone()
    };
    let offset = outlier_pct(id, &ramp, &brighter, &all).map_err(|e| e.to_string())?;
    let shifted = GrayImage {
        data: (0..60 * 40)
            .map(|i| {
                let (x, y) = (i % 60, i / 60);
                if x >= 3 {
                    a.get(x - 3, y)
                } else {
                    0.0
                }
            })
            .collect(),
        ..a.clone()
    };
    let region: Vec<bool> = (0..60 * 40).map(|i| i % 60 + 3 < 60).collect();
    let shift = outlier_pct(id, &a, &shifted, &region).map_err(|e| e.to_string())?;
    let msg = format!(
        "3-4-5 rmse {r}; outliers identical {same}%, +20 levels {offset}%, 3 px shift {shift}%"
    );
    ensure(
        r == 5.0 && same == 0.0 && offset == 100.0 && shift == 0.0,
        msg.clone(),
    )?;
    Ok(msg)
}

fn render_consistency() -> Outcome {
    let img = smooth(240, 160);
    let rect = Rect::of_size(240, 160);
    let h = Homography::from_params([0.95, 0.04, 12.0, -0.03, 1.02, 5.0, 2e-4, -1e-4]).unwrap();
    let hinv = h.invert().unwrap();
    let grid = build_grid(rect, 20.0).map_err(|e| e.to_string())?;
    let v = grid.map_vertices(&h).map_err(|e| e.to_string())?;
    let canvas = compute_canvas(&rect, &[&v]).map_err(|e| e.to_string())?;
    let mesh = warp_image(&img, &grid, &v, &canvas).map_err(|e| e.to_string())?;
    let direct = resample(&img, &canvas, |p| {
        let q = hinv.apply(p).ok()?;
        rect.contains_closed(q, 0.0).then_some(q)
    })
    .map_err(|e| e.to_string())?;
    let (mm, dm) = (mesh.mask.as_ref().unwrap(), direct.mask.as_ref().unwrap());
    let (mut both, mut close) = (0usize, 0usize);
    for i in 0..canvas.width * canvas.height {
        if mm[i] && dm[i] {
            both += 1;
            close +=
                usize::from((0..3).all(|c| {
                    (mesh.data[i * 3 + c] as i32 - direct.data[i * 3 + c] as i32).abs() <= 1
                }));
        }
    }
    let frac = close as f64 / both.max(1) as f64;

    let layer = |valid: &dyn Fn(usize, usize) -> bool| {
        let mut l = RasterImage::from_fn(90, 60, 1, |_, _, _| 100).unwrap();
        l.mask = Some((0..90 * 60).map(|i| valid(i % 90, i / 90)).collect());
        l
    };
    let layers = [
        layer(&|x, _| x < 50),
        layer(&|x, y| x >= 30 && y < 45),
        layer(&|x, y| x + y > 70 && x < 85),
    ];
    let weights = blend_weights(&layers).map_err(|e| e.to_string())?;
    let mut unity = 0.0f64;
    for i in 0..90 * 60 {
        let any = layers.iter().any(|l| l.mask.as_ref().unwrap()[i]);
        let sum: f64 = weights.iter().map(|w| w[i]).sum();
        unity = unity.max((sum - if any { 1.0 } else { 0.0 }).abs());
    }
    let msg = format!(
        "{close}/{both} pixels within 1 level ({:.2}%), partition-of-unity error {unity:.1e}",
        100.0 * frac
    );
    ensure(both > 0 && frac >= 0.99 && unity < 1e-12, msg.clone())?;
    Ok(msg)
}

fn png_bytes(img: &RasterImage, dir: &std::path::Path, name: &str) -> Vec<u8> {
    let p = dir.join(name);
    img.save(&p).unwrap();
    std::fs::read(p).unwrap()
}

fn end_to_end_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s = generate_scene(&SceneSpec {
        planes: 2,
        images: 3,
        seed: 11,
        width: 320,
        height: 240,
        focal: 280.0,
        ..SceneSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = StitchConfig {
        seed: 3,
        ..StitchConfig::default()
    };
    let corr = s.pair(1, 0).0;
    let mut same = Vec::new();
    for c in [Some(&corr), None] {
        let a = stitch_two(&s.images[1], &s.images[0], c, &cfg).map_err(|e| e.to_string())?;
        let b = stitch_two(&s.images[1], &s.images[0], c, &cfg).map_err(|e| e.to_string())?;
        same.push(
            png_bytes(&a.image, dir.path(), "a.png") == png_bytes(&b.image, dir.path(), "b.png"),
        );
    }
    for c in [Some(&s.correspondences.noisy), None] {
        let a = stitch_multi(&s.images, c, None, &cfg).map_err(|e| e.to_string())?;
        let b = stitch_multi(&s.images, c, None, &cfg).map_err(|e| e.to_string())?;
        same.push(
            png_bytes(&a.image, dir.path(), "a.png") == png_bytes(&b.image, dir.path(), "b.png"),
        );
    }
    let msg = format!(
        "byte-identical PNGs: stitch2 given/detected {}/{}, stitchn given/detected {}/{}",
        same[0], same[1], same[2], same[3]
    );
    ensure(same.iter().all(|&b| b), msg.clone())?;
    Ok(msg)
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("invariant-slope law", invariant_slope_law),
        ("quasi-homography structure", qh_structure),
        ("energy at the prior", energy_at_prior),
        ("saliency trade-off", saliency_tradeoff),
        ("warp-quality ordering", warp_quality_ordering),
        ("bundle adjustment recovery", bundle_recovery),
        ("metric fidelity", metric_fidelity),
        ("render consistency", render_consistency),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome =
            catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                println!("FAIL {:>2} {name}: {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
