//! Experimental finite-difference solver for the ε-problem on a rectangle.
//!
//! `−∂_i(q_ij(x/ε) ∂_j u) = f(x) m(x/ε)` with Dirichlet data, discretized by
//! the conservative nine-point stencil (face fluxes with averaged tangential
//! differences) and solved with a sparse LU. A rectangle is not a smooth
//! domain, so only the `L²` and `H¹` diagnostics are reported.


use faer::prelude::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use serde::{Deserialize, Serialize};

use super::{fit_rate, BvpError, RateFit};
use crate::expr::Expression;
use crate::torus::{MatrixField, ScalarField};

/// Largest grid, counted in nodes per axis squared.
pub const MAX_UNKNOWNS_2D: usize = 2048 * 2048;
pub const DEFAULT_MESH_PER_PERIOD_2D: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn unit() -> Self {
        Rect { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct RectProblem {
    pub domain: Rect,
    /// Source in `x1, x2`.
    pub source: Expression,
    /// Dirichlet data in `x1, x2`, read on the boundary only.
    pub boundary: Expression,
}

/// Periodic coefficients sampled at the half-step lattice of one ε-cell.
#[derive(Debug, Clone)]
pub struct CellTable {
    /// Half steps per cell side.
    size: usize,
    /// Mesh the table was built for; `None` for constant coefficients.
    mesh_per_period: Option<usize>,
    /// `[q11, q12, q21, q22, m]`, each `size²`, row-major in `(y1, y2)`.
    tables: [Vec<f64>; 5],
}

impl CellTable {
    pub fn new(q: &MatrixField, m: &ScalarField, mesh_per_period: usize) -> Result<Self, BvpError> {
        if q.dim() != 2 {
            return Err(BvpError::Dimension(q.dim()));
        }
        let fields = [q.get(0, 0), q.get(0, 1), q.get(1, 0), q.get(1, 1), m];
        Ok(Self::from_fn(mesh_per_period, |y| fields.map(|f| f.interpolate(&y))))
    }

    /// Tabulates `y ↦ [q11, q12, q21, q22, m]` on the half-step lattice.
    pub fn from_fn(mesh_per_period: usize, f: impl Fn([f64; 2]) -> [f64; 5]) -> Self {
        let size = 2 * mesh_per_period;
        let mut tables: [Vec<f64>; 5] = Default::default();
        for t in tables.iter_mut() {
            *t = vec![0.0; size * size];
        }
        for a in 0..size {
            for b in 0..size {
                let v = f([a as f64 / size as f64, b as f64 / size as f64]);
                for k in 0..5 {
                    tables[k][a * size + b] = v[k];
                }
            }
        }
        CellTable {
            size,
            mesh_per_period: Some(mesh_per_period),
            tables,
        }
    }

    /// Constant coefficients `q`, `m ≡ 1`.
    pub fn constant(q: [[f64; 2]; 2]) -> Self {
        CellTable {
            size: 1,
            mesh_per_period: None,
            tables: [vec![q[0][0]], vec![q[0][1]], vec![q[1][0]], vec![q[1][1]], vec![1.0]],
        }
    }

    /// Value of table `k` at half-step lattice point `(a, b)` (global indices).
    fn at(&self, k: usize, a: i64, b: i64) -> f64 {
        let s = self.size as i64;
        self.tables[k][(a.rem_euclid(s) * s + b.rem_euclid(s)) as usize]
    }
}

/// Node values on the full `(nx+1) × (ny+1)` grid, boundary included.
#[derive(Debug, Clone)]
pub struct RectSolution {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    pub domain: Rect,
    /// Row-major in `(i, j)`: index `i * (ny + 1) + j`.
    pub values: Vec<f64>,
}

impl RectSolution {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * (self.ny + 1) + j]
    }
}

/// Factorized operator for one `(ε, mesh)` pair; several right-hand sides
/// reuse it.
pub struct RectOperator {
    nx: usize,
    ny: usize,
    h: f64,
    /// Half-step lattice offset of `x0, y0`.
    origin: (i64, i64),
    domain: Rect,
    table: CellTable,
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

fn lattice_count(len: f64, h: f64) -> Result<usize, BvpError> {
    let n = (len / h).round();
    if n < 2.0 || ((n * h) - len).abs() > 1e-9 * len.max(1.0) {
        return Err(BvpError::Rect(format!(
            "side length {len} is not a multiple of the mesh width {h}"
        )));
    }
    Ok(n as usize)
}

impl RectOperator {
    /// `h = ε / mesh_per_period`; the rectangle must be a whole number of
    /// mesh cells in each direction and start on the lattice.
    pub fn new(table: CellTable, domain: Rect, eps: f64, mesh_per_period: usize) -> Result<Self, BvpError> {
        if !(eps > 0.0) {
            return Err(BvpError::Epsilon(eps));
        }
        if table.mesh_per_period.is_some_and(|k| k != mesh_per_period) {
            return Err(BvpError::Rect("coefficient table was built for a different mesh".into()));
        }
        let h = eps / mesh_per_period as f64;
        let nx = lattice_count(domain.x1 - domain.x0, h)?;
        let ny = lattice_count(domain.y1 - domain.y0, h)?;
        if (nx + 1) * (ny + 1) > MAX_UNKNOWNS_2D {
            return Err(BvpError::Budget {
                eps,
                required: (nx + 1) * (ny + 1),
                budget: MAX_UNKNOWNS_2D,
            });
        }
        let origin = (
            lattice_offset(domain.x0, h)?,
            lattice_offset(domain.y0, h)?,
        );
        let n = (nx - 1) * (ny - 1);
        let mut trips = Vec::with_capacity(9 * n);
        let mut op = RectOperator {
            nx,
            ny,
            h,
            origin,
            domain,
            table,
            lu: placeholder_lu()?,
        };
        for i in 1..nx {
            for j in 1..ny {
                let row = op.index(i, j).expect("interior");
                for (di, dj, w) in op.stencil(i, j) {
                    if let Some(col) = op.index((i as i64 + di) as usize, (j as i64 + dj) as usize) {
                        trips.push(Triplet::new(row, col, w));
                    }
                }
            }
        }
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trips)
            .map_err(|e| BvpError::Rect(format!("sparse assembly failed: {e:?}")))?;
        op.lu = mat
            .sp_lu()
            .map_err(|e| BvpError::Rect(format!("sparse LU failed: {e:?}")))?;
        Ok(op)
    }

    pub fn unknowns(&self) -> usize {
        (self.nx - 1) * (self.ny - 1)
    }

    fn index(&self, i: usize, j: usize) -> Option<usize> {
        if i == 0 || j == 0 || i >= self.nx || j >= self.ny {
            None
        } else {
            Some((i - 1) * (self.ny - 1) + (j - 1))
        }
    }

    fn coeff(&self, k: usize, a2: i64, b2: i64) -> f64 {
        // a2, b2 are doubled node indices
        self.table.at(k, 2 * self.origin.0 + a2, 2 * self.origin.1 + b2)
    }

    /// Nine-point weights `(di, dj, w)` of `−div(q∇u)` at node `(i, j)`, scaled by `h²`.
    fn stencil(&self, i: usize, j: usize) -> Vec<(i64, i64, f64)> {
        let (a, b) = (2 * i as i64, 2 * j as i64);
        let (q11e, q12e) = (self.coeff(0, a + 1, b), self.coeff(1, a + 1, b));
        let (q11w, q12w) = (self.coeff(0, a - 1, b), self.coeff(1, a - 1, b));
        let (q22n, q21n) = (self.coeff(3, a, b + 1), self.coeff(2, a, b + 1));
        let (q22s, q21s) = (self.coeff(3, a, b - 1), self.coeff(2, a, b - 1));
        let mut w: Vec<(i64, i64, f64)> = Vec::with_capacity(16);
        // h·F_E = q11e (u_E − u_P) + q12e/4 (u_NE + u_N − u_SE − u_S)
        // −h²·div = −(hF_E − hF_W) − (hF_N − hF_S)
        w.push((1, 0, -q11e));
        w.push((0, 0, q11e));
        for (di, dj, s) in [(1, 1, 1.0), (0, 1, 1.0), (1, -1, -1.0), (0, -1, -1.0)] {
            w.push((di, dj, -0.25 * q12e * s));
        }
        w.push((0, 0, q11w));
        w.push((-1, 0, -q11w));
        for (di, dj, s) in [(0, 1, 1.0), (-1, 1, 1.0), (0, -1, -1.0), (-1, -1, -1.0)] {
            w.push((di, dj, 0.25 * q12w * s));
        }
        w.push((0, 1, -q22n));
        w.push((0, 0, q22n));
        for (di, dj, s) in [(1, 1, 1.0), (1, 0, 1.0), (-1, 1, -1.0), (-1, 0, -1.0)] {
            w.push((di, dj, -0.25 * q21n * s));
        }
        w.push((0, 0, q22s));
        w.push((0, -1, -q22s));
        for (di, dj, s) in [(1, 0, 1.0), (1, -1, 1.0), (-1, 0, -1.0), (-1, -1, -1.0)] {
            w.push((di, dj, 0.25 * q21s * s));
        }
        // merge duplicates
        let mut merged: Vec<(i64, i64, f64)> = Vec::with_capacity(9);
        for (di, dj, v) in w {
            match merged.iter_mut().find(|e| e.0 == di && e.1 == dj) {
                Some(e) => e.2 += v,
                None => merged.push((di, dj, v)),
            }
        }
        merged
    }

    fn point(&self, i: usize, j: usize) -> [f64; 2] {
        [self.domain.x0 + i as f64 * self.h, self.domain.y0 + j as f64 * self.h]
    }

    /// Solves with source `f` (weighted by `m(x/ε)`) and boundary data `g`.
    pub fn solve(&self, f: &dyn Fn([f64; 2]) -> f64, g: &dyn Fn([f64; 2]) -> f64) -> RectSolution {
        let (nx, ny) = (self.nx, self.ny);
        let mut values = vec![0.0; (nx + 1) * (ny + 1)];
        for i in 0..=nx {
            for j in 0..=ny {
                if self.index(i, j).is_none() {
                    values[i * (ny + 1) + j] = g(self.point(i, j));
                }
            }
        }
        let n = self.unknowns();
        let h2 = self.h * self.h;
        let mut rhs = Mat::<f64>::zeros(n, 1);
        for i in 1..nx {
            for j in 1..ny {
                let row = self.index(i, j).expect("interior");
                let m = self.coeff(4, 2 * i as i64, 2 * j as i64);
                let mut r = h2 * f(self.point(i, j)) * m;
                for (di, dj, w) in self.stencil(i, j) {
                    let (ii, jj) = ((i as i64 + di) as usize, (j as i64 + dj) as usize);
                    if self.index(ii, jj).is_none() {
                        r -= w * values[ii * (ny + 1) + jj];
                    }
                }
                rhs[(row, 0)] = r;
            }
        }
        let x = self.lu.solve(&rhs);
        for i in 1..nx {
            for j in 1..ny {
                values[i * (ny + 1) + j] = x[(self.index(i, j).expect("interior"), 0)];
            }
        }
        RectSolution {
            nx,
            ny,
            h: self.h,
            domain: self.domain,
            values,
        }
    }
}

fn lattice_offset(x0: f64, h: f64) -> Result<i64, BvpError> {
    let k = (x0 / h).round();
    if (k * h - x0).abs() > 1e-9 * h.max(1.0) {
        return Err(BvpError::Rect(format!("corner {x0} is not on the mesh lattice of width {h}")));
    }
    Ok(k as i64)
}

fn placeholder_lu() -> Result<faer::sparse::linalg::solvers::Lu<usize, f64>, BvpError> {
    let one = SparseColMat::<usize, f64>::try_new_from_triplets(1, 1, &[Triplet::new(0, 0, 1.0)])
        .map_err(|e| BvpError::Rect(format!("{e:?}")))?;
    one.sp_lu().map_err(|e| BvpError::Rect(format!("{e:?}")))
}

fn eval2(e: &Expression) -> impl Fn([f64; 2]) -> f64 + '_ {
    move |p: [f64; 2]| e.evaluate(&p).unwrap_or(f64::NAN)
}

/// Cell-centred gradients by averaging the two edge differences per axis.
fn cell_gradients(values: &[f64], nx: usize, ny: usize, h: f64) -> Vec<[f64; 2]> {
    let at = |i: usize, j: usize| values[i * (ny + 1) + j];
    let mut out = Vec::with_capacity(nx * ny);
    for i in 0..nx {
        for j in 0..ny {
            let gx = 0.5 * ((at(i + 1, j) - at(i, j)) + (at(i + 1, j + 1) - at(i, j + 1))) / h;
            let gy = 0.5 * ((at(i, j + 1) - at(i, j)) + (at(i + 1, j + 1) - at(i + 1, j))) / h;
            out.push([gx, gy]);
        }
    }
    out
}

/// Node gradients by central differences, one-sided on the boundary.
fn node_gradients(sol: &RectSolution) -> Vec<[f64; 2]> {
    let (nx, ny, h) = (sol.nx, sol.ny, sol.h);
    let d = |lo: f64, hi: f64, span: f64| (hi - lo) / span;
    let mut out = Vec::with_capacity((nx + 1) * (ny + 1));
    for i in 0..=nx {
        for j in 0..=ny {
            let gx = match i {
                0 => d(sol.at(0, j), sol.at(1, j), h),
                _ if i == nx => d(sol.at(nx - 1, j), sol.at(nx, j), h),
                _ => d(sol.at(i - 1, j), sol.at(i + 1, j), 2.0 * h),
            };
            let gy = match j {
                0 => d(sol.at(i, 0), sol.at(i, 1), h),
                _ if j == ny => d(sol.at(i, ny - 1), sol.at(i, ny), h),
                _ => d(sol.at(i, j - 1), sol.at(i, j + 1), 2.0 * h),
            };
            out.push([gx, gy]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectNorms {
    pub l2: f64,
    pub h1_raw: f64,
    pub h1_corrected: f64,
}

fn grid_l2(e: &[f64], h: f64) -> f64 {
    (e.iter().map(|v| v * v).sum::<f64>() * h * h).sqrt()
}

fn grid_h1(e: &[f64], nx: usize, ny: usize, h: f64) -> f64 {
    let g = cell_gradients(e, nx, ny, h);
    let semi: f64 = g.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum::<f64>() * h * h;
    (grid_l2(e, h).powi(2) + semi).sqrt()
}

/// Norms of `u_ε − u` and of `u_ε − u − Σ_j (Φ_j − x_j) ∂_j u`.
pub fn rect_error_norms(u_eps: &RectSolution, u: &RectSolution, correctors: &[RectSolution; 2]) -> RectNorms {
    let (nx, ny, h) = (u_eps.nx, u_eps.ny, u_eps.h);
    let grad_u = node_gradients(u);
    let raw: Vec<f64> = u_eps.values.iter().zip(&u.values).map(|(a, b)| a - b).collect();
    let mut corrected = raw.clone();
    for i in 0..=nx {
        for j in 0..=ny {
            let k = i * (ny + 1) + j;
            let x = [u_eps.domain.x0 + i as f64 * h, u_eps.domain.y0 + j as f64 * h];
            for a in 0..2 {
                corrected[k] -= (correctors[a].values[k] - x[a]) * grad_u[k][a];
            }
        }
    }
    RectNorms {
        l2: grid_l2(&raw, h),
        h1_raw: grid_h1(&raw, nx, ny, h),
        h1_corrected: grid_h1(&corrected, nx, ny, h),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RectRow {
    pub eps: f64,
    pub nodes_per_axis: usize,
    pub norms: RectNorms,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RectReport {
    pub experimental: bool,
    pub rows: Vec<RectRow>,
    pub l2: Option<RateFit>,
    pub h1_corrected: Option<RateFit>,
}

/// ε-sweep of the rectangle solver against the constant-`ā` solution on the
/// same mesh.
pub fn rect_sweep(
    q: &MatrixField,
    m: &ScalarField,
    a_bar: [[f64; 2]; 2],
    prob: &RectProblem,
    eps: &[f64],
    mesh_per_period: usize,
) -> Result<RectReport, BvpError> {
    let table = CellTable::new(q, m, mesh_per_period)?;
    let f = eval2(&prob.source);
    let g = eval2(&prob.boundary);
    let mut rows = Vec::with_capacity(eps.len());
    for &e in eps {
        let op = RectOperator::new(table.clone(), prob.domain, e, mesh_per_period)?;
        let u_eps = op.solve(&f, &g);
        let correctors = [op.solve(&|_| 0.0, &|p| p[0]), op.solve(&|_| 0.0, &|p| p[1])];
        let hom = RectOperator::new(CellTable::constant(a_bar), prob.domain, e, mesh_per_period)?;
        let u = hom.solve(&f, &g);
        rows.push(RectRow {
            eps: e,
            nodes_per_axis: op.nx + 1,
            norms: rect_error_norms(&u_eps, &u, &correctors),
        });
    }
    let fit = |pick: fn(&RectRow) -> f64| {
        let errs: Vec<f64> = rows.iter().map(pick).collect();
        fit_rate(eps, &errs).ok()
    };
    Ok(RectReport {
        experimental: true,
        l2: fit(|r| r.norms.l2),
        h1_corrected: fit(|r| r.norms.h1_corrected),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expression;
    use crate::torus::TorusGrid;

    #[test]
    fn linear_data_is_reproduced() {
        let op = RectOperator::new(CellTable::constant([[1.0, 0.0], [0.0, 1.0]]), Rect::unit(), 0.25, 8).unwrap();
        let u = op.solve(&|_| 0.0, &|p| p[0]);
        for i in 0..=op.nx {
            for j in 0..=op.ny {
                assert!((u.at(i, j) - i as f64 * op.h).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn quadratic_with_anisotropic_constant_matrix() {
        // u = x² + xy: −div(A∇u) = −(2 a11 + a12 + a21) for constant A
        let a = [[2.0, 0.3], [0.3, 1.0]];
        let op = RectOperator::new(CellTable::constant(a), Rect::unit(), 0.5, 8).unwrap();
        let src = 2.0 * a[0][0] + a[0][1] + a[1][0];
        let u = op.solve(&|_| -src, &|p| p[0] * p[0] + p[0] * p[1]);
        for i in 0..=op.nx {
            for j in 0..=op.ny {
                let (x, y) = (i as f64 * op.h, j as f64 * op.h);
                assert!((u.at(i, j) - (x * x + x * y)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn unit_eps_equals_unscaled_solve() {
        use std::f64::consts::PI;
        let grid = TorusGrid::cube(2, 16).unwrap();
        let s = |f: &str| crate::expr::sample_scalar(&parse_expression(f, 2).unwrap(), &grid).unwrap();
        let q = MatrixField::new(
            vec![s("2+sin(2*pi*y1)"), s("0.2*cos(2*pi*y2)"), s("0.2*cos(2*pi*y2)"), s("1.5")],
            crate::torus::Symmetry::Symmetric,
        )
        .unwrap();
        let scaled = RectOperator::new(CellTable::new(&q, &s("1"), 16).unwrap(), Rect::unit(), 1.0, 16).unwrap();
        let direct = CellTable::from_fn(16, |y| {
            let off = 0.2 * (2.0 * PI * y[1]).cos();
            [2.0 + (2.0 * PI * y[0]).sin(), off, off, 1.5, 1.0]
        });
        let unscaled = RectOperator::new(direct, Rect::unit(), 1.0, 16).unwrap();
        let ua = scaled.solve(&|_| 1.0, &|_| 0.0);
        let ub = unscaled.solve(&|_| 1.0, &|_| 0.0);
        let diff = ua.values.iter().zip(&ub.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
        let mismatched = RectOperator::new(CellTable::new(&q, &s("1"), 8).unwrap(), Rect::unit(), 1.0, 16);
        assert!(mismatched.is_err());
    }

    #[test]
    fn misaligned_domain_refused() {
        let r = RectOperator::new(
            CellTable::constant([[1.0, 0.0], [0.0, 1.0]]),
            Rect { x0: 0.0, x1: 1.03, y0: 0.0, y1: 1.0 },
            0.25,
            4,
        );
        assert!(matches!(r, Err(BvpError::Rect(_))));
    }
}
