//! Alignment metrics, the train/test split and synthetic scenes.

mod scene;

pub use scene::{
    generate_scene, Camera, SceneCorrespondences, ScenePlane, SceneSpec, SyntheticScene,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, PointPair};
use crate::raster::GrayImage;

/// Root mean squared transfer error of `warp` over `pairs`.
pub fn rmse(warp: impl Fn(Point2) -> Result<Point2>, pairs: &[PointPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut sum = 0.0;
    for p in pairs {
        sum += (warp(p.p)? - p.p_prime).norm_sq();
    }
    Ok((sum / pairs.len() as f64).sqrt())
}

/// Chebyshev radius of the similarity search window.
pub const OUTLIER_WINDOW: isize = 4;
/// Intensity differences strictly below this count as similar.
pub const OUTLIER_LEVELS: f32 = 10.0;

/// Percentage of `region` pixels of `a` whose warped position in `b` has no
/// pixel within the window differing by less than ten gray levels. Pixels
/// whose warp fails or leaves `b` entirely count as outliers.
pub fn outlier_pct(
    warp: impl Fn(Point2) -> Result<Point2>,
    a: &GrayImage,
    b: &GrayImage,
    region: &[bool],
) -> Result<f64> {
    if region.len() != a.width * a.height {
        return Err(Error::InvalidInput(
            "region mask does not match the image".into(),
        ));
    }
    let total = region.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::EmptyOverlap);
    }
    let mut outliers = 0usize;
    for (i, _) in region.iter().enumerate().filter(|(_, &r)| r) {
        let (x, y) = (i % a.width, i / a.width);
        let va = a.get(x, y);
        let similar = warp(Point2::new(x as f64, y as f64)).is_ok_and(|q| {
            if !q.is_finite() {
                return false;
            }
            let (cx, cy) = (q.x.round() as isize, q.y.round() as isize);
            (-OUTLIER_WINDOW..=OUTLIER_WINDOW).any(|dy| {
                (-OUTLIER_WINDOW..=OUTLIER_WINDOW).any(|dx| {
                    let (nx, ny) = (cx + dx, cy + dy);
                    nx >= 0
                        && ny >= 0
                        && (nx as usize) < b.width
                        && (ny as usize) < b.height
                        && (b.get(nx as usize, ny as usize) - va).abs() < OUTLIER_LEVELS
                })
            })
        });
        if !similar {
            outliers += 1;
        }
    }
    Ok(100.0 * outliers as f64 / total as f64)
}

/// Seeded shuffle into halves; with an odd count the training half is larger.
pub fn split_train_test<T: Clone>(items: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(Error::TooFew(items.len()));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = items.len().div_ceil(2);
    let train = idx[..n_train].iter().map(|&i| items[i].clone()).collect();
    let test = idx[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, test))
}

/// Per-warp metrics of one evaluation run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WarpMetrics {
    pub mode: String,
    pub rmse_train: f64,
    pub rmse_test: f64,
    pub outlier_pct: Option<f64>,
}

/// Averages over repetitions, one entry per warp mode.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub repetitions: usize,
    pub runs: Vec<Vec<WarpMetrics>>,
    pub mean: Vec<WarpMetrics>,
}

impl MetricReport {
    pub fn from_runs(runs: Vec<Vec<WarpMetrics>>) -> Self {
        let mut mean: Vec<WarpMetrics> = Vec::new();
        if let Some(first) = runs.first() {
            for (m, base) in first.iter().enumerate() {
                let rows: Vec<&WarpMetrics> = runs.iter().filter_map(|r| r.get(m)).collect();
                let n = rows.len() as f64;
                let outl: Vec<f64> = rows.iter().filter_map(|r| r.outlier_pct).collect();
                mean.push(WarpMetrics {
                    mode: base.mode.clone(),
                    rmse_train: rows.iter().map(|r| r.rmse_train).sum::<f64>() / n,
                    rmse_test: rows.iter().map(|r| r.rmse_test).sum::<f64>() / n,
                    outlier_pct: (!outl.is_empty())
                        .then(|| outl.iter().sum::<f64>() / outl.len() as f64),
                });
            }
        }
        MetricReport {
            repetitions: runs.len(),
            runs,
            mean,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_hand_cases() {
        let id = |p: Point2| Ok(p);
        let p = PointPair::new(Point2::new(1.0, 2.0), Point2::new(1.0, 2.0));
        assert_eq!(rmse(id, &[p]).unwrap(), 0.0);
        let q = PointPair::new(Point2::new(0.0, 0.0), Point2::new(3.0, 4.0));
        assert_eq!(rmse(id, &[q]).unwrap(), 5.0);
        assert!(matches!(rmse(id, &[]), Err(Error::EmptySet)));
    }

    #[test]
    fn split_rules() {
        let v: Vec<usize> = (0..11).collect();
        let (a, b) = split_train_test(&v, 3).unwrap();
        assert_eq!((a.len(), b.len()), (6, 5));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, v);
        assert_eq!(split_train_test(&v, 3).unwrap(), (a, b));
        assert!(split_train_test(&v[..1], 0).is_err());
    }
}
