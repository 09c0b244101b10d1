//! Moving DLT: a field of locally weighted homographies that relaxes to the
//! global fit away from the data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DltSystem, Homography, LinePair, Point2, PointPair, Rect, RowSite};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovingDltConfig {
    /// Gaussian bandwidth in pixels.
    pub sigma: f64,
    /// Weight floor in (0, 1).
    pub gamma: f64,
    pub cell_size: f64,
    /// Include line rows in the local fits.
    pub use_lines: bool,
}

impl Default for MovingDltConfig {
    fn default() -> Self {
        MovingDltConfig {
            sigma: 8.5 * 40.0,
            gamma: 0.0025,
            cell_size: 40.0,
            use_lines: true,
        }
    }
}

impl MovingDltConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidInput("sigma must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidInput("gamma must lie in (0, 1]".into()));
        }
        if !(self.cell_size > 0.0) {
            return Err(Error::InvalidInput("cell size must be positive".into()));
        }
        Ok(())
    }
}

/// One homography per cell of a regular partition of the target rectangle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalWarpField {
    pub rect: Rect,
    pub cols: usize,
    pub rows: usize,
    pub cell_w: f64,
    pub cell_h: f64,
    /// Row-major, `rows * cols` entries.
    pub homographies: Vec<Homography>,
    /// Cells whose weights all sit at the floor (extrapolation region).
    pub at_floor: Vec<bool>,
    pub global: Homography,
}

impl LocalWarpField {
    /// A field that is the same homography everywhere.
    pub fn uniform(rect: Rect, cell_size: f64, h: Homography) -> Self {
        let (cols, rows, cell_w, cell_h) = partition(&rect, cell_size);
        LocalWarpField {
            rect,
            cols,
            rows,
            cell_w,
            cell_h,
            homographies: vec![h; cols * rows],
            at_floor: vec![true; cols * rows],
            global: h,
        }
    }

    pub fn cell_center(&self, col: usize, row: usize) -> Point2 {
        Point2::new(
            self.rect.x + (col as f64 + 0.5) * self.cell_w,
            self.rect.y + (row as f64 + 0.5) * self.cell_h,
        )
    }

    pub fn cell_of(&self, p: Point2) -> Result<(usize, usize)> {
        let padded = Rect::new(
            self.rect.x - self.cell_w,
            self.rect.y - self.cell_h,
            self.rect.width + 2.0 * self.cell_w,
            self.rect.height + 2.0 * self.cell_h,
        );
        if !p.is_finite() || !padded.contains_closed(p, 0.0) {
            return Err(Error::OutOfBounds { x: p.x, y: p.y });
        }
        let c = ((p.x - self.rect.x) / self.cell_w).floor();
        let r = ((p.y - self.rect.y) / self.cell_h).floor();
        Ok((
            c.clamp(0.0, (self.cols - 1) as f64) as usize,
            r.clamp(0.0, (self.rows - 1) as f64) as usize,
        ))
    }

    pub fn homography_at(&self, p: Point2) -> Result<&Homography> {
        let (c, r) = self.cell_of(p)?;
        Ok(&self.homographies[r * self.cols + c])
    }

    /// Applies the homography of the cell enclosing `p`.
    pub fn eval(&self, p: Point2) -> Result<Point2> {
        self.homography_at(p)?.apply(p)
    }
}

/// Cell counts and sizes so that cells of at most `cell` tile `rect` exactly.
fn partition(rect: &Rect, cell: f64) -> (usize, usize, f64, f64) {
    let cols = ((rect.width / cell).ceil() as usize).max(1);
    let rows = ((rect.height / cell).ceil() as usize).max(1);
    (
        cols,
        rows,
        rect.width / cols as f64,
        rect.height / rows as f64,
    )
}

/// Per-row weights `max(exp(-d^2 / sigma^2), gamma)` for a location. Line rows
/// use the nearer endpoint. Returns whether every weight hit the floor.
pub fn moving_weights(sites: &[RowSite], c: Point2, sigma: f64, gamma: f64) -> (Vec<f64>, bool) {
    let s2 = sigma * sigma;
    let mut all_floor = true;
    let w = sites
        .iter()
        .map(|site| {
            let d2 = match *site {
                RowSite::Point(p) => (p - c).norm_sq(),
                RowSite::Line(a, b) => (a - c).norm_sq().min((b - c).norm_sq()),
            };
            let g = (-d2 / s2).exp();
            if g > gamma {
                all_floor = false;
                g
            } else {
                gamma
            }
        })
        .collect();
    (w, all_floor)
}

pub fn fit_moving_dlt(
    points: &[PointPair],
    lines: &[LinePair],
    rect: Rect,
    cfg: &MovingDltConfig,
) -> Result<LocalWarpField> {
    cfg.validate()?;
    if rect.is_empty() {
        return Err(Error::InvalidInput("empty target rectangle".into()));
    }
    let used_lines: &[LinePair] = if cfg.use_lines { lines } else { &[] };
    let system = DltSystem::build(points, used_lines)?;
    let global = system.solve(None)?;
    let (cols, rows, cell_w, cell_h) = partition(&rect, cfg.cell_size);
    let mut field = LocalWarpField {
        rect,
        cols,
        rows,
        cell_w,
        cell_h,
        homographies: Vec::new(),
        at_floor: Vec::new(),
        global,
    };
    let fits: Vec<(Homography, bool)> = (0..rows * cols)
        .into_par_iter()
        .map(|idx| {
            let c = field.cell_center(idx % cols, idx / cols);
            let (w, floor) = moving_weights(&system.sites, c, cfg.sigma, cfg.gamma);
            if floor {
                return (global, true);
            }
            match system.solve(Some(&w)) {
                Ok(h) => (h, false),
                Err(e) => {
                    log::debug!("cell {idx} falls back to the global homography: {e}");
                    (global, false)
                }
            }
        })
        .collect();
    for (h, floor) in fits {
        field.homographies.push(h);
        field.at_floor.push(floor);
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planar(h: &Homography) -> Vec<PointPair> {
        let mut v = Vec::new();
        for i in 0..8 {
            for j in 0..6 {
                let p = Point2::new(20.0 + 70.0 * i as f64, 15.0 + 75.0 * j as f64);
                v.push(PointPair::new(p, h.apply(p).unwrap()));
            }
        }
        v
    }

    #[test]
    fn planar_scene_collapses_to_global() {
        let h = Homography::from_params([1.05, 0.02, 30.0, -0.01, 0.98, 5.0, 2e-4, -1e-4]).unwrap();
        let rect = Rect::new(0.0, 0.0, 560.0, 450.0);
        let field = fit_moving_dlt(&planar(&h), &[], rect, &MovingDltConfig::default()).unwrap();
        for local in &field.homographies {
            assert!(local.param_distance(&h) < 1e-6);
        }
        let p = Point2::new(123.0, 321.0);
        assert!((field.eval(p).unwrap() - h.apply(p).unwrap()).norm() < 1e-6);
    }

    #[test]
    fn gamma_one_reproduces_global() {
        let h = Homography::from_params([1.0, 0.0, 10.0, 0.0, 1.0, 0.0, 1e-4, 0.0]).unwrap();
        let mut pts = planar(&h);
        pts[3].p_prime.x += 2.0;
        pts[17].p_prime.y -= 3.0;
        let cfg = MovingDltConfig {
            gamma: 1.0,
            ..Default::default()
        };
        let field = fit_moving_dlt(&pts, &[], Rect::new(0.0, 0.0, 560.0, 450.0), &cfg).unwrap();
        for local in &field.homographies {
            assert_eq!(*local, field.global);
        }
        assert!(field.at_floor.iter().all(|&f| f));
    }

    #[test]
    fn cell_center_applies_stored_homography() {
        let h = Homography::translation(3.0, 4.0);
        let field = LocalWarpField::uniform(Rect::new(0.0, 0.0, 100.0, 60.0), 40.0, h);
        assert_eq!((field.cols, field.rows), (3, 2));
        let c = field.cell_center(2, 1);
        assert_eq!(
            field.eval(c).unwrap(),
            field.homographies[5].apply(c).unwrap()
        );
        assert!(matches!(
            field.eval(Point2::new(500.0, 0.0)),
            Err(Error::OutOfBounds { .. })
        ));
        // One cell of padding is allowed.
        assert!(field.eval(Point2::new(-20.0, 70.0)).is_ok());
    }

    #[test]
    fn invalid_config() {
        let cfg = MovingDltConfig {
            sigma: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
