//! Procedural multi-plane scenes rendered by ray casting.
//!
//! World coordinates are those of camera 0. Camera `k` sits at
//! `(k * baseline, 0, 0)` and is turned by `k * yaw_step` about the vertical
//! axis. Plane `p` satisfies `n_p . X = d_p` and is only present inside a
//! vertical slab of world x, so neighbouring planes at different depths form
//! a step and occlude each other.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{CorrespondenceSet, MultiCorrespondenceSet, MultiLine, MultiPoint};
use crate::geometry::{Homography, Point2};
use crate::raster::RasterImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub planes: usize,
    /// Depth of each plane along the optical axis of camera 0; missing
    /// entries continue the last spacing.
    pub depths: Vec<f64>,
    pub baseline: f64,
    /// Yaw between consecutive cameras, radians.
    pub yaw_step: f64,
    /// Maximum random tilt of each plane normal, radians.
    pub tilt: f64,
    /// Standard deviation of the Gaussian noise added to observations, pixels.
    pub noise: f64,
    pub seed: u64,
    pub images: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Point samples drawn in each source image.
    pub points_per_image: usize,
    pub lines_per_plane: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            planes: 2,
            depths: vec![8.0, 12.0],
            baseline: 0.5,
            yaw_step: 0.35,
            tilt: 0.15,
            noise: 0.5,
            seed: 0,
            images: 2,
            width: 480,
            height: 360,
            focal: 400.0,
            points_per_image: 300,
            lines_per_plane: 12,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.planes == 0 {
            return bad("a scene needs at least one plane");
        }
        if self.images < 2 {
            return bad("a scene needs at least two images");
        }
        if self.width < 16 || self.height < 16 {
            return bad("image size below 16 px");
        }
        if !(self.focal > 0.0)
            || !(self.noise >= 0.0)
            || !self.baseline.is_finite()
            || !self.yaw_step.is_finite()
        {
            return bad("focal, noise, baseline or yaw out of range");
        }
        if self.depths.is_empty() || self.depths.iter().any(|&d| !(d > 0.0)) {
            return bad("depths must be positive");
        }
        if !(self.tilt.abs() < 1.0) {
            return bad("tilt must be below 1 rad");
        }
        Ok(())
    }

    fn depth(&self, p: usize) -> f64 {
        let d = &self.depths;
        if p < d.len() {
            return d[p];
        }
        let step = if d.len() >= 2 {
            d[d.len() - 1] - d[d.len() - 2]
        } else {
            d[0] * 0.5
        };
        d[d.len() - 1] + step * (p + 1 - d.len()) as f64
    }
}

/// Pose mapping world points into camera coordinates: `x_c = r (x - c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub r: Matrix3<f64>,
    pub c: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePlane {
    pub normal: Vector3<f64>,
    pub distance: f64,
    /// World x interval `[x0, x1)` where the plane exists.
    pub x_range: (f64, f64),
    e1: Vector3<f64>,
    e2: Vector3<f64>,
    lattice_angle: f64,
    texture_seed: u64,
    strokes: Vec<(Vector3<f64>, Vector3<f64>)>,
}

/// Generated observations with ground-truth identity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneCorrespondences {
    /// Noise-free observations.
    pub clean: MultiCorrespondenceSet,
    /// Observations with Gaussian noise on every image except the source.
    pub noisy: MultiCorrespondenceSet,
    pub point_planes: Vec<usize>,
    pub point_sources: Vec<usize>,
    pub line_planes: Vec<usize>,
    pub line_sources: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub k: Matrix3<f64>,
    pub cameras: Vec<Camera>,
    pub planes: Vec<ScenePlane>,
    pub images: Vec<RasterImage>,
    /// Visible plane per pixel centre, 255 where no plane is hit.
    pub plane_masks: Vec<Vec<u8>>,
    pub noise: f64,
    pub correspondences: SceneCorrespondences,
}

const TEXTURE_BLOCK: f64 = 0.4;
const STROKE_HALF_WIDTH: f64 = 0.03;
const NO_PLANE: u8 = 255;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit_hash(seed: u64, i: i64, j: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(i as u64 ^ splitmix(j as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn yaw(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

fn tilt_normal(ax: f64, ay: f64) -> Vector3<f64> {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    (ry * rx * Vector3::z()).normalize()
}

impl ScenePlane {
    fn local(&self, x: &Vector3<f64>) -> (f64, f64) {
        (x.dot(&self.e1), x.dot(&self.e2))
    }

    fn contains(&self, x: &Vector3<f64>) -> bool {
        x.x >= self.x_range.0 && x.x < self.x_range.1
    }

    /// Colour at a world point on the plane.
    fn shade(&self, x: &Vector3<f64>) -> [f64; 3] {
        let (u, v) = self.local(x);
        for (a, b) in &self.strokes {
            let ab = b - a;
            let t = ((x - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
            if (a + ab * t - x).norm() <= STROKE_HALF_WIDTH {
                return [15.0; 3];
            }
        }
        let (s, c) = self.lattice_angle.sin_cos();
        let (lu, lv) = (c * u + s * v, -s * u + c * v);
        let (i, j) = (
            (lu / TEXTURE_BLOCK).floor() as i64,
            (lv / TEXTURE_BLOCK).floor() as i64,
        );
        let value = 50.0 + 170.0 * unit_hash(self.texture_seed, i, j);
        let hue = std::f64::consts::TAU * unit_hash(self.texture_seed ^ 0x5bd1, i, j);
        let shading = 12.0 * (0.9 * u + 0.3).sin() * (0.7 * v - 0.2).cos();
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            *o = value + shading + 25.0 * (hue + ch as f64 * 2.094).sin();
        }
        out
    }
}

impl SyntheticScene {
    fn ray(&self, cam: usize, p: Point2) -> (Vector3<f64>, Vector3<f64>) {
        let kinv = self.k.try_inverse().expect("intrinsics are invertible");
        let cm = &self.cameras[cam];
        let d = cm.r.transpose() * (kinv * Vector3::new(p.x, p.y, 1.0));
        (cm.c, d)
    }

    /// Nearest plane hit by the ray through pixel position `p` of image `cam`.
    pub fn trace(&self, cam: usize, p: Point2) -> Option<(usize, Vector3<f64>)> {
        let (o, d) = self.ray(cam, p);
        let mut best: Option<(f64, usize, Vector3<f64>)> = None;
        for (i, pl) in self.planes.iter().enumerate() {
            let den = pl.normal.dot(&d);
            if den.abs() < 1e-12 {
                continue;
            }
            let t = (pl.distance - pl.normal.dot(&o)) / den;
            if t <= 1e-9 {
                continue;
            }
            let x = o + d * t;
            if pl.contains(&x) && best.is_none_or(|b| t < b.0) {
                best = Some((t, i, x));
            }
        }
        best.map(|(_, i, x)| (i, x))
    }

    /// Pixel position of world point `x` in image `cam`, if in front of it.
    pub fn project(&self, cam: usize, x: &Vector3<f64>) -> Option<Point2> {
        let cm = &self.cameras[cam];
        let q = self.k * (cm.r * (x - cm.c));
        (q.z > 1e-9).then(|| Point2::new(q.x / q.z, q.y / q.z))
    }

    /// Position of `x` (lying on `plane`) in image `cam` if it is inside the
    /// image and not occluded.
    pub fn visible(&self, cam: usize, x: &Vector3<f64>, plane: usize) -> Option<Point2> {
        let p = self.project(cam, x)?;
        let (w, h) = (self.spec.width as f64, self.spec.height as f64);
        if p.x < 0.0 || p.y < 0.0 || p.x > w - 1.0 || p.y > h - 1.0 {
            return None;
        }
        let (hit, y) = self.trace(cam, p)?;
        (hit == plane && (y - x).norm() <= 1e-6 * (1.0 + x.norm())).then_some(p)
    }

    /// Ground-truth homography of `plane` from image `from` to image `to`.
    pub fn homography(&self, plane: usize, from: usize, to: usize) -> Result<Homography> {
        let pl = &self.planes[plane];
        let (a, b) = (&self.cameras[from], &self.cameras[to]);
        let n_a = a.r * pl.normal;
        let d_a = pl.distance - pl.normal.dot(&a.c);
        if d_a.abs() < 1e-12 {
            return Err(Error::DegenerateConfiguration(
                "camera lies on the plane".into(),
            ));
        }
        let r_ab = b.r * a.r.transpose();
        let t_ab = b.r * (a.c - b.c);
        let kinv = self.k.try_inverse().ok_or(Error::SingularHomography)?;
        Homography::from_matrix(&(self.k * (r_ab + t_ab * n_a.transpose() / d_a) * kinv))
    }

    fn pair_from(
        &self,
        set: &MultiCorrespondenceSet,
        a: usize,
        b: usize,
    ) -> (CorrespondenceSet, Vec<usize>) {
        let pair = set.pair(a, b);
        let planes = set
            .points
            .iter()
            .zip(&self.correspondences.point_planes)
            .filter(|(p, _)| p.obs.contains_key(&a) && p.obs.contains_key(&b))
            .map(|(_, &pl)| pl)
            .collect();
        (pair, planes)
    }

    /// Noisy correspondences between target `a` and reference `b`, with the
    /// plane of every point.
    pub fn pair(&self, a: usize, b: usize) -> (CorrespondenceSet, Vec<usize>) {
        self.pair_from(&self.correspondences.noisy, a, b)
    }

    pub fn pair_clean(&self, a: usize, b: usize) -> (CorrespondenceSet, Vec<usize>) {
        self.pair_from(&self.correspondences.clean, a, b)
    }

    /// Writes `img<k>.png`, `multi.json`, `corr.json` (image 1 onto image 0)
    /// and `truth.json` with the per-plane homographies into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (k, img) in self.images.iter().enumerate() {
            img.save(&dir.join(format!("img{k}.png")))?;
        }
        self.correspondences.noisy.save(&dir.join("multi.json"))?;
        self.pair(1, 0).0.save(&dir.join("corr.json"))?;
        let mut truth = Vec::new();
        for p in 0..self.planes.len() {
            for from in 0..self.images.len() {
                for to in 0..self.images.len() {
                    if from != to {
                        let m = self.homography(p, from, to)?.matrix();
                        let rows: Vec<Vec<f64>> = (0..3)
                            .map(|r| (0..3).map(|c| m[(r, c)]).collect())
                            .collect();
                        truth.push(
                            serde_json::json!({ "plane": p, "from": from, "to": to, "h": rows }),
                        );
                    }
                }
            }
        }
        let doc = serde_json::json!({ "spec": self.spec, "homographies": truth });
        std::fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }
}

/// Builds, renders and samples a scene. Deterministic in `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let k = Matrix3::new(
        spec.focal,
        0.0,
        (w - 1.0) / 2.0,
        0.0,
        spec.focal,
        (h - 1.0) / 2.0,
        0.0,
        0.0,
        1.0,
    );
    let cameras: Vec<Camera> = (0..spec.images)
        .map(|i| Camera {
            r: yaw(i as f64 * spec.yaw_step),
            c: Vector3::new(i as f64 * spec.baseline, 0.0, 0.0),
        })
        .collect();

    // Slab boundaries split the angular range shared by the first two views.
    let half_fov = ((w - 1.0) / 2.0 / spec.focal).atan();
    let (lo, hi) = (spec.yaw_step - half_fov, half_fov);
    let (lo, hi) = if lo < hi {
        (lo, hi)
    } else {
        (-half_fov, half_fov)
    };
    let mean_depth = (0..spec.planes).map(|p| spec.depth(p)).sum::<f64>() / spec.planes as f64;
    let mut bounds = vec![f64::NEG_INFINITY];
    for j in 1..spec.planes {
        let angle = lo + (hi - lo) * j as f64 / spec.planes as f64;
        bounds.push(angle.tan() * mean_depth);
    }
    bounds.push(f64::INFINITY);

    let mut planes = Vec::with_capacity(spec.planes);
    for p in 0..spec.planes {
        let normal = tilt_normal(
            rng.random_range(-1.0..=1.0) * spec.tilt,
            rng.random_range(-1.0..=1.0) * spec.tilt,
        );
        let distance = spec.depth(p) * normal.z;
        let e1 = Vector3::y().cross(&normal).normalize();
        let e2 = normal.cross(&e1);
        let x_range = (bounds[p], bounds[p + 1]);
        planes.push(ScenePlane {
            normal,
            distance,
            x_range,
            e1,
            e2,
            lattice_angle: rng.random_range(-0.6..0.6),
            texture_seed: rng.random(),
            strokes: Vec::new(),
        });
    }

    let mut scene = SyntheticScene {
        spec: spec.clone(),
        k,
        cameras,
        planes,
        images: Vec::new(),
        plane_masks: Vec::new(),
        noise: spec.noise,
        correspondences: SceneCorrespondences::default(),
    };
    for p in 0..spec.planes {
        let strokes = place_strokes(&scene, p, &mut rng);
        scene.planes[p].strokes = strokes;
    }
    for cam in 0..spec.images {
        let (img, mask) = render(&scene, cam)?;
        scene.images.push(img);
        scene.plane_masks.push(mask);
    }
    scene.correspondences = sample_correspondences(&scene, &mut rng)?;
    Ok(scene)
}

/// Random painted segments centred where some camera sees the plane slab.
fn place_strokes(
    scene: &SyntheticScene,
    plane: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let spec = &scene.spec;
    let pl = &scene.planes[plane];
    let mut strokes = Vec::new();
    for _ in 0..spec.lines_per_plane * 50 {
        if strokes.len() == spec.lines_per_plane {
            break;
        }
        let cam = rng.random_range(0..spec.images);
        let p = Point2::new(
            rng.random_range(0.0..spec.width as f64 - 1.0),
            rng.random_range(0.0..spec.height as f64 - 1.0),
        );
        let len = rng.random_range(1.5..4.0);
        let ang: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (o, d) = scene.ray(cam, p);
        let den = pl.normal.dot(&d);
        if den.abs() < 1e-12 {
            continue;
        }
        let t = (pl.distance - pl.normal.dot(&o)) / den;
        let centre = o + d * t;
        if t <= 0.0 || !pl.contains(&centre) {
            continue;
        }
        let dir = (pl.e1 * ang.cos() + pl.e2 * ang.sin()) * (len / 2.0);
        strokes.push((centre - dir, centre + dir));
    }
    strokes
}

fn render(scene: &SyntheticScene, cam: usize) -> Result<(RasterImage, Vec<u8>)> {
    use rayon::prelude::*;
    let (w, h) = (scene.spec.width, scene.spec.height);
    const OFFSETS: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];
    let rows: Vec<(Vec<u8>, Vec<u8>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut data = Vec::with_capacity(w * 3);
            let mut mask = Vec::with_capacity(w);
            for x in 0..w {
                let centre = Point2::new(x as f64, y as f64);
                mask.push(scene.trace(cam, centre).map_or(NO_PLANE, |(p, _)| p as u8));
                let mut acc = [0.0; 3];
                for (dx, dy) in OFFSETS {
                    let c = scene
                        .trace(cam, Point2::new(centre.x + dx, centre.y + dy))
                        .map_or([0.0; 3], |(p, xw)| scene.planes[p].shade(&xw));
                    for ch in 0..3 {
                        acc[ch] += c[ch] / 4.0;
                    }
                }
                data.extend(acc.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
            }
            (data, mask)
        })
        .collect();
    let mut img = RasterImage::new(w, h, 3)?;
    let mut mask = Vec::with_capacity(w * h);
    for (y, (d, m)) in rows.into_iter().enumerate() {
        img.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&d);
        mask.extend(m);
    }
    Ok((img, mask))
}

fn sample_correspondences(
    scene: &SyntheticScene,
    rng: &mut ChaCha8Rng,
) -> Result<SceneCorrespondences> {
    let spec = &scene.spec;
    let normal =
        Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let jitter = |p: Point2, rng: &mut ChaCha8Rng| -> [f64; 2] {
        if spec.noise > 0.0 {
            [p.x + normal.sample(rng), p.y + normal.sample(rng)]
        } else {
            [p.x, p.y]
        }
    };
    let mut out = SceneCorrespondences::default();
    let (w, h) = (spec.width as f64, spec.height as f64);
    // Two-view scenes sample only in the target (image 1); otherwise each
    // image takes a turn as the exact source.
    let sources: Vec<usize> = if spec.images == 2 {
        vec![1]
    } else {
        (0..spec.images).collect()
    };
    for &src in &sources {
        let mut kept = 0;
        let mut attempts = 0;
        while kept < spec.points_per_image && attempts < spec.points_per_image * 50 {
            attempts += 1;
            let p = Point2::new(
                rng.random_range(0.0..w - 1.0),
                rng.random_range(0.0..h - 1.0),
            );
            let Some((plane, x)) = scene.trace(src, p) else {
                continue;
            };
            let mut clean = BTreeMap::new();
            clean.insert(src, [p.x, p.y]);
            for cam in (0..spec.images).filter(|&c| c != src) {
                if let Some(q) = scene.visible(cam, &x, plane) {
                    clean.insert(cam, [q.x, q.y]);
                }
            }
            if clean.len() < 2 {
                continue;
            }
            let noisy = clean
                .iter()
                .map(|(&c, &v)| {
                    (
                        c,
                        if c == src {
                            v
                        } else {
                            jitter(Point2::new(v[0], v[1]), rng)
                        },
                    )
                })
                .collect();
            let id = format!("p{}", out.clean.points.len());
            out.clean.points.push(MultiPoint {
                id: id.clone(),
                obs: clean,
            });
            out.noisy.points.push(MultiPoint { id, obs: noisy });
            out.point_planes.push(plane);
            out.point_sources.push(src);
            kept += 1;
        }
    }
    for (pi, pl) in scene.planes.iter().enumerate() {
        for (a, b) in &pl.strokes {
            let mut clean = BTreeMap::new();
            for cam in 0..spec.images {
                let ends = [scene.visible(cam, a, pi), scene.visible(cam, b, pi)];
                let inner = (1..8).all(|i| {
                    scene
                        .visible(cam, &(a + (b - a) * (i as f64 / 8.0)), pi)
                        .is_some()
                });
                if let [Some(pa), Some(pb)] = ends {
                    if inner && pa.dist(pb) >= 20.0 {
                        clean.insert(cam, [[pa.x, pa.y], [pb.x, pb.y]]);
                    }
                }
            }
            if clean.len() < 2 {
                continue;
            }
            let src = *clean.keys().next_back().expect("nonempty");
            let noisy = clean
                .iter()
                .map(|(&c, s)| {
                    if c == src {
                        (c, *s)
                    } else {
                        let e0 = jitter(Point2::new(s[0][0], s[0][1]), rng);
                        let e1 = jitter(Point2::new(s[1][0], s[1][1]), rng);
                        (c, [e0, e1])
                    }
                })
                .collect();
            let id = format!("l{}", out.clean.lines.len());
            out.clean.lines.push(MultiLine {
                id: id.clone(),
                obs: clean,
            });
            out.noisy.lines.push(MultiLine { id, obs: noisy });
            out.line_planes.push(pi);
            out.line_sources.push(src);
        }
    }
    Ok(out)
}
