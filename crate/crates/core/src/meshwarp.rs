//! Mesh deformation: grid, bilinear anchors, energy rows and the stacked
//! least-squares solve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Homography, LinePair, Point2, PointPair, Rect};
use crate::linework::{CrossLineSamples, SalientLine};
use crate::sparse::{
    conjugate_gradient, rcm_ordering, relative_residual, EnvelopeCholesky, SymmetricCsr,
};

/// Weight of the rows tying every unknown to the homography prior.
pub const TIKHONOV_WEIGHT: f64 = 1e-4;
/// Above this many unknowns the solve switches to conjugate gradients.
pub const DIRECT_SOLVE_LIMIT: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshGrid {
    pub rect: Rect,
    /// Vertex rows and columns.
    pub rows: usize,
    pub cols: usize,
    pub cell_w: f64,
    pub cell_h: f64,
    /// `[x1, y1, x2, y2, ...]`, row-major vertex order.
    pub vertices: Vec<f64>,
}

pub fn build_grid(rect: Rect, cell: f64) -> Result<MeshGrid> {
    if rect.is_empty() || !(cell > 0.0) {
        return Err(Error::InvalidInput(
            "grid needs a nonempty rect and positive cell".into(),
        ));
    }
    let cols = (rect.width / cell).ceil() as usize + 1;
    let rows = (rect.height / cell).ceil() as usize + 1;
    let cell_w = rect.width / (cols - 1) as f64;
    let cell_h = rect.height / (rows - 1) as f64;
    let mut vertices = Vec::with_capacity(2 * rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            // Last row and column snap to the boundary exactly.
            let x = if c + 1 == cols {
                rect.x1()
            } else {
                rect.x + c as f64 * cell_w
            };
            let y = if r + 1 == rows {
                rect.y1()
            } else {
                rect.y + r as f64 * cell_h
            };
            vertices.push(x);
            vertices.push(y);
        }
    }
    Ok(MeshGrid {
        rect,
        rows,
        cols,
        cell_w,
        cell_h,
        vertices,
    })
}

impl MeshGrid {
    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn vertex(&self, i: usize) -> Point2 {
        Point2::new(self.vertices[2 * i], self.vertices[2 * i + 1])
    }

    /// Vertex indices of cell `(row, col)`: top-left, top-right, bottom-right,
    /// bottom-left.
    pub fn quad(&self, row: usize, col: usize) -> [usize; 4] {
        [
            self.index(row, col),
            self.index(row, col + 1),
            self.index(row + 1, col + 1),
            self.index(row + 1, col),
        ]
    }

    pub fn cell_count(&self) -> usize {
        (self.rows - 1) * (self.cols - 1)
    }

    /// `H(V)` as a vertex vector.
    pub fn map_vertices(&self, h: &Homography) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.vertices.len());
        for i in 0..self.n() {
            let q = h.apply(self.vertex(i))?;
            out.push(q.x);
            out.push(q.y);
        }
        Ok(out)
    }

    pub fn anchor(&self, p: Point2) -> Result<BilinearAnchor> {
        let tol = 1e-9 * (1.0 + self.rect.width.max(self.rect.height));
        if !p.is_finite() || !self.rect.contains_closed(p, tol) {
            return Err(Error::OutOfBounds { x: p.x, y: p.y });
        }
        let fx = ((p.x - self.rect.x) / self.cell_w).clamp(0.0, (self.cols - 1) as f64);
        let fy = ((p.y - self.rect.y) / self.cell_h).clamp(0.0, (self.rows - 1) as f64);
        let c = (fx.floor() as usize).min(self.cols - 2);
        let r = (fy.floor() as usize).min(self.rows - 2);
        let tl = self.vertex(self.index(r, c));
        let br = self.vertex(self.index(r + 1, c + 1));
        let u = ((p.x - tl.x) / (br.x - tl.x)).clamp(0.0, 1.0);
        let v = ((p.y - tl.y) / (br.y - tl.y)).clamp(0.0, 1.0);
        Ok(BilinearAnchor {
            vertices: self.quad(r, c),
            weights: [(1.0 - u) * (1.0 - v), u * (1.0 - v), u * v, (1.0 - u) * v],
        })
    }

    /// Bilinear image of `p` under the deformed vertices `v`.
    pub fn interpolate(&self, v: &[f64], p: Point2) -> Result<Point2> {
        Ok(self.anchor(p)?.eval(v))
    }

    /// Cells whose deformed quad has non-positive signed area.
    pub fn fold_overs(&self, v: &[f64]) -> Vec<usize> {
        let mut out = Vec::new();
        for r in 0..self.rows - 1 {
            for c in 0..self.cols - 1 {
                let q = self.quad(r, c).map(|i| Point2::new(v[2 * i], v[2 * i + 1]));
                let area: f64 = (0..4).map(|k| q[k].cross(q[(k + 1) % 4])).sum::<f64>() * 0.5;
                if !(area > 0.0) {
                    out.push(r * (self.cols - 1) + c);
                }
            }
        }
        out
    }
}

/// Four enclosing vertices (TL, TR, BR, BL) and their bilinear weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilinearAnchor {
    pub vertices: [usize; 4],
    pub weights: [f64; 4],
}

impl BilinearAnchor {
    pub fn eval(&self, v: &[f64]) -> Point2 {
        let mut p = Point2::default();
        for (&i, &w) in self.vertices.iter().zip(&self.weights) {
            p = p + w * Point2::new(v[2 * i], v[2 * i + 1]);
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    Alignment,
    Naturalness,
    Perspective,
    Projective,
    Saliency,
    Tikhonov,
}

/// One scalar residual `weight * (Σ coeff·x − rhs)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
    pub weight: f64,
    pub term: Term,
}

impl EnergyRow {
    /// Builds a row, merging repeated indices and dropping exact zeros.
    pub fn new(term: Term, mut coeffs: Vec<(usize, f64)>, rhs: f64) -> Self {
        coeffs.sort_by_key(|c| c.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(coeffs.len());
        for (i, v) in coeffs {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => merged.push((i, v)),
            }
        }
        merged.retain(|c| c.1 != 0.0);
        EnergyRow {
            coeffs: merged,
            rhs,
            weight: 1.0,
            term,
        }
    }

    /// Unweighted residual.
    pub fn residual(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(i, c)| c * x[i]).sum::<f64>() - self.rhs
    }
}

fn scaled(anchor: &BilinearAnchor, s: f64, axis: usize, out: &mut Vec<(usize, f64)>) {
    for (&i, &w) in anchor.vertices.iter().zip(&anchor.weights) {
        out.push((2 * i + axis, s * w));
    }
}

/// Coefficients of `⟨Σ sₖ φ(pₖ), n⟩`.
fn dot_coeffs(terms: &[(&BilinearAnchor, f64)], n: Point2) -> Vec<(usize, f64)> {
    let mut c = Vec::with_capacity(8 * terms.len());
    for &(a, s) in terms {
        scaled(a, s * n.x, 0, &mut c);
        scaled(a, s * n.y, 1, &mut c);
    }
    c
}

/// Two rows (x and y) for `φ(a) + φ(c) − 2 φ(b)`.
fn second_difference(
    term: Term,
    a: &BilinearAnchor,
    b: &BilinearAnchor,
    c: &BilinearAnchor,
) -> [EnergyRow; 2] {
    [0, 1].map(|axis| {
        let mut co = Vec::with_capacity(12);
        scaled(a, 1.0, axis, &mut co);
        scaled(c, 1.0, axis, &mut co);
        scaled(b, -2.0, axis, &mut co);
        EnergyRow::new(term, co, 0.0)
    })
}

fn anchors(grid: &MeshGrid, pts: &[Point2]) -> Result<Vec<BilinearAnchor>> {
    pts.iter().map(|&p| grid.anchor(p)).collect()
}

pub fn assemble_alignment(grid: &MeshGrid, pairs: &[PointPair]) -> Vec<EnergyRow> {
    let mut rows = Vec::with_capacity(2 * pairs.len());
    for (k, pair) in pairs.iter().enumerate() {
        let Ok(a) = grid.anchor(pair.p) else {
            log::warn!("alignment pair {k} lies outside the mesh; skipped");
            continue;
        };
        for (axis, rhs) in [(0, pair.p_prime.x), (1, pair.p_prime.y)] {
            let mut c = Vec::with_capacity(4);
            scaled(&a, 1.0, axis, &mut c);
            rows.push(EnergyRow::new(Term::Alignment, c, rhs));
        }
    }
    rows
}

pub fn assemble_naturalness(grid: &MeshGrid, lines: &[LinePair]) -> Vec<EnergyRow> {
    let mut rows = Vec::with_capacity(2 * lines.len());
    for (k, lp) in lines.iter().enumerate() {
        let Ok(ends) = anchors(grid, &[lp.seg.start, lp.seg.end]) else {
            log::warn!("line pair {k} leaves the mesh; skipped");
            continue;
        };
        let n = lp.line.normal();
        for a in &ends {
            rows.push(EnergyRow::new(
                Term::Naturalness,
                dot_coeffs(&[(a, 1.0)], n),
                -lp.line.c,
            ));
        }
    }
    rows
}

fn slope_rows(term: Term, anchors: &[BilinearAnchor], n: Point2, rows: &mut Vec<EnergyRow>) {
    for w in anchors.windows(2) {
        rows.push(EnergyRow::new(
            term,
            dot_coeffs(&[(&w[1], 1.0), (&w[0], -1.0)], n),
            0.0,
        ));
    }
}

/// Slope rows along both families plus second differences along v-lines.
pub fn assemble_perspective(grid: &MeshGrid, samples: &CrossLineSamples) -> Vec<EnergyRow> {
    let mut rows = Vec::new();
    for (i, l) in samples.u_lines.iter().enumerate() {
        if l.samples.len() < 2 {
            log::debug!(
                "u-line {i}: {}",
                Error::TooFewSamples {
                    needed: 2,
                    got: l.samples.len()
                }
            );
            continue;
        }
        match anchors(grid, &l.samples) {
            Ok(a) => slope_rows(Term::Perspective, &a, l.normal, &mut rows),
            Err(e) => log::warn!("u-line {i} skipped: {e}"),
        }
    }
    for (j, l) in samples.v_lines.iter().enumerate() {
        if l.samples.len() < 3 {
            log::debug!(
                "v-line {j}: {}",
                Error::TooFewSamples {
                    needed: 3,
                    got: l.samples.len()
                }
            );
            continue;
        }
        match anchors(grid, &l.samples) {
            Ok(a) => {
                slope_rows(Term::Perspective, &a, l.normal, &mut rows);
                for t in a.windows(3) {
                    rows.extend(second_difference(Term::Perspective, &t[0], &t[1], &t[2]));
                }
            }
            Err(e) => log::warn!("v-line {j} skipped: {e}"),
        }
    }
    rows
}

/// Second differences over u-line sample triples lying entirely in Ω.
pub fn assemble_projective(grid: &MeshGrid, samples: &CrossLineSamples) -> Vec<EnergyRow> {
    let mut rows = Vec::new();
    for (i, l) in samples.u_lines.iter().enumerate() {
        let inside = l.in_omega.iter().filter(|&&b| b).count();
        if inside < 3 {
            if inside > 0 {
                log::debug!(
                    "u-line {i}: {}",
                    Error::TooFewSamples {
                        needed: 3,
                        got: inside
                    }
                );
            }
            continue;
        }
        let Ok(a) = anchors(grid, &l.samples) else {
            log::warn!("u-line {i} leaves the mesh; skipped");
            continue;
        };
        for k in 0..a.len() - 2 {
            if l.in_omega[k] && l.in_omega[k + 1] && l.in_omega[k + 2] {
                rows.extend(second_difference(
                    Term::Projective,
                    &a[k],
                    &a[k + 1],
                    &a[k + 2],
                ));
            }
        }
    }
    rows
}

pub fn assemble_saliency(grid: &MeshGrid, salient: &[SalientLine]) -> Vec<EnergyRow> {
    let mut rows = Vec::new();
    for (k, s) in salient.iter().enumerate() {
        if s.samples.len() < 2 {
            log::debug!(
                "salient line {k}: {}",
                Error::TooFewSamples {
                    needed: 2,
                    got: s.samples.len()
                }
            );
            continue;
        }
        match anchors(grid, &s.samples) {
            Ok(a) => slope_rows(Term::Saliency, &a, s.normal, &mut rows),
            Err(e) => log::warn!("salient line {k} skipped: {e}"),
        }
    }
    rows
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub l: f64,
    pub ps: f64,
    pub pj: f64,
    pub s: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            l: 5.0,
            ps: 50.0,
            pj: 5.0,
            s: 5.0,
        }
    }
}

impl Lambdas {
    pub fn of(&self, term: Term) -> f64 {
        match term {
            Term::Alignment => 1.0,
            Term::Naturalness => self.l,
            Term::Perspective => self.ps,
            Term::Projective => self.pj,
            Term::Saliency => self.s,
            Term::Tikhonov => TIKHONOV_WEIGHT * TIKHONOV_WEIGHT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.l, self.ps, self.pj, self.s]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            Ok(())
        } else {
            Err(Error::InvalidInput(
                "weights must be finite and non-negative".into(),
            ))
        }
    }
}

/// Unweighted sums of squares per term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub alignment: f64,
    pub naturalness: f64,
    pub perspective: f64,
    pub projective: f64,
    pub saliency: f64,
    pub tikhonov: f64,
}

impl EnergyBreakdown {
    pub fn get(&self, t: Term) -> f64 {
        match t {
            Term::Alignment => self.alignment,
            Term::Naturalness => self.naturalness,
            Term::Perspective => self.perspective,
            Term::Projective => self.projective,
            Term::Saliency => self.saliency,
            Term::Tikhonov => self.tikhonov,
        }
    }

    fn slot(&mut self, t: Term) -> &mut f64 {
        match t {
            Term::Alignment => &mut self.alignment,
            Term::Naturalness => &mut self.naturalness,
            Term::Perspective => &mut self.perspective,
            Term::Projective => &mut self.projective,
            Term::Saliency => &mut self.saliency,
            Term::Tikhonov => &mut self.tikhonov,
        }
    }

    /// The weighted total without the regularizer.
    pub fn total(&self, l: &Lambdas) -> f64 {
        self.alignment
            + l.l * self.naturalness
            + l.ps * self.perspective
            + l.pj * self.projective
            + l.s * self.saliency
    }
}

/// Stacked weighted rows over `unknowns` variables; the first `2 n` belong to
/// mesh vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySystem {
    pub unknowns: usize,
    pub rows: Vec<EnergyRow>,
    pub lambdas: Lambdas,
}

impl EnergySystem {
    pub fn new(unknowns: usize, lambdas: Lambdas) -> Self {
        EnergySystem {
            unknowns,
            rows: Vec::new(),
            lambdas,
        }
    }

    /// Adds rows scaled by the square root of their term's weight.
    pub fn extend(&mut self, rows: Vec<EnergyRow>) {
        for mut r in rows {
            r.weight *= self.lambdas.of(r.term).sqrt();
            self.rows.push(r);
        }
    }

    /// Rows `1e-4 (xᵢ − priorᵢ)` for every unknown.
    pub fn add_tikhonov(&mut self, prior: &[f64]) {
        assert_eq!(prior.len(), self.unknowns);
        let rows = prior
            .iter()
            .enumerate()
            .map(|(i, &p)| EnergyRow::new(Term::Tikhonov, vec![(i, 1.0)], p))
            .collect();
        self.extend(rows);
    }

    pub fn count(&self, term: Term) -> usize {
        self.rows.iter().filter(|r| r.term == term).count()
    }

    pub fn breakdown(&self, x: &[f64]) -> EnergyBreakdown {
        let mut e = EnergyBreakdown::default();
        for r in &self.rows {
            let v = r.residual(x);
            *e.slot(r.term) += v * v;
        }
        e
    }

    /// `Σ (wᵢ rᵢ)²` over all rows, regularizer included.
    pub fn stacked_energy(&self, x: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|r| {
                let v = r.weight * r.residual(x);
                v * v
            })
            .sum()
    }

    /// `AᵀW²A` and `AᵀW²b`, optionally without the regularizer rows.
    pub fn normal_equations(&self, with_tikhonov: bool) -> (SymmetricCsr, Vec<f64>) {
        let mut trip = Vec::new();
        let mut rhs = vec![0.0; self.unknowns];
        for r in self
            .rows
            .iter()
            .filter(|r| with_tikhonov || r.term != Term::Tikhonov)
        {
            let w2 = r.weight * r.weight;
            for (a, &(i, ci)) in r.coeffs.iter().enumerate() {
                rhs[i] += w2 * ci * r.rhs;
                for &(j, cj) in &r.coeffs[..=a] {
                    let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
                    trip.push((hi, lo, w2 * ci * cj));
                }
            }
        }
        (SymmetricCsr::from_lower_triplets(self.unknowns, trip), rhs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpSolution {
    pub v: Vec<f64>,
    /// The system without the regularizer was singular.
    pub rank_deficient: bool,
    /// Relative residual of the normal equations.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SolverKind {
    /// Direct below `DIRECT_SOLVE_LIMIT` unknowns, iterative above.
    #[default]
    Auto,
    Direct,
    Iterative,
}

/// Minimizes the stacked weighted least-squares energy.
pub fn solve(system: &EnergySystem) -> Result<WarpSolution> {
    solve_with(system, SolverKind::Auto)
}

pub fn solve_with(system: &EnergySystem, kind: SolverKind) -> Result<WarpSolution> {
    let n = system.unknowns;
    if n == 0 {
        return Err(Error::InvalidInput("no unknowns".into()));
    }
    let (a, b) = system.normal_equations(true);
    let iterative = match kind {
        SolverKind::Auto => n > DIRECT_SOLVE_LIMIT,
        SolverKind::Direct => false,
        SolverKind::Iterative => true,
    };
    if iterative {
        let (x, res) = conjugate_gradient(&a, &b, vec![0.0; n], 1e-12, 20 * n);
        if res >= 1e-10 {
            log::warn!("conjugate gradients stopped at relative residual {res:.3e}");
        }
        return Ok(WarpSolution {
            v: x,
            rank_deficient: false,
            residual: res,
        });
    }
    let (bare, _) = system.normal_equations(false);
    let perm = rcm_ordering(&a);
    let rank_deficient = matches!(
        EnvelopeCholesky::factor(&bare, perm.clone(), 1e-12),
        Err(Error::RankDeficient)
    );
    if rank_deficient {
        log::warn!(
            "{}; the prior rows restore definiteness",
            Error::RankDeficient
        );
    }
    let chol = EnvelopeCholesky::factor(&a, perm, 1e-15)?;
    let mut x = chol.solve(&b);
    let mut res = relative_residual(&a, &x, &b);
    // Iterative refinement for badly scaled systems.
    for _ in 0..3 {
        if res < 1e-12 {
            break;
        }
        let ax = a.mul_vec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let dx = chol.solve(&r);
        let cand: Vec<f64> = x.iter().zip(&dx).map(|(x, d)| x + d).collect();
        let cres = relative_residual(&a, &cand, &b);
        if cres >= res {
            break;
        }
        x = cand;
        res = cres;
    }
    if res >= 1e-10 {
        log::warn!("normal equations solved to relative residual {res:.3e}");
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateConfiguration(
            "non-finite mesh solution".into(),
        ));
    }
    Ok(WarpSolution {
        v: x,
        rank_deficient,
        residual: res,
    })
}

/// Inputs of the single-pair mesh energy.
#[derive(Debug, Clone, Default)]
pub struct MeshTerms<'a> {
    pub points: &'a [PointPair],
    pub lines: &'a [LinePair],
    pub cross: Option<&'a CrossLineSamples>,
    pub salient: &'a [SalientLine],
}

/// Assembles every term for one target image and adds the prior rows.
pub fn build_system(
    grid: &MeshGrid,
    terms: &MeshTerms,
    lambdas: Lambdas,
    prior: &Homography,
) -> Result<EnergySystem> {
    lambdas.validate()?;
    let mut sys = EnergySystem::new(2 * grid.n(), lambdas);
    sys.extend(assemble_alignment(grid, terms.points));
    sys.extend(assemble_naturalness(grid, terms.lines));
    if let Some(cross) = terms.cross {
        sys.extend(assemble_perspective(grid, cross));
        sys.extend(assemble_projective(grid, cross));
    }
    sys.extend(assemble_saliency(grid, terms.salient));
    sys.add_tikhonov(&grid.map_vertices(prior)?);
    Ok(sys)
}

/// Builds and solves; fold-overs are logged, not prevented.
pub fn solve_mesh(
    grid: &MeshGrid,
    terms: &MeshTerms,
    lambdas: Lambdas,
    prior: &Homography,
) -> Result<WarpSolution> {
    let sys = build_system(grid, terms, lambdas, prior)?;
    let sol = solve(&sys)?;
    let folds = grid.fold_overs(&sol.v);
    if !folds.is_empty() {
        log::warn!("fold-over in {} mesh cells", folds.len());
    }
    Ok(sol)
}
