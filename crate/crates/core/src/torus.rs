//! Periodic fields on a uniform grid of the flat torus, with spectral calculus.
//!
//! Node `k = (k_1, …, k_d)` sits at `y = (k_1/n_1, …, k_d/n_d)`; values are
//! stored row-major with the last axis contiguous. Fourier coefficients are
//! normalized so that the zero mode equals the mean.

use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("right-hand side has mean {mean:e}, beyond tolerance {tol:e}; no periodic solution exists")]
    NonZeroMean { mean: f64, tol: f64 },
    #[error("ellipticity violated at node {node} (y = {point:?}): eigenvalue {eigenvalue} < {lambda}")]
    Ellipticity {
        node: usize,
        point: Vec<f64>,
        eigenvalue: f64,
        lambda: f64,
    },
    #[error("matrix field is not flagged symmetric")]
    NotSymmetric,
    #[error("component layout mismatch: {0}")]
    Layout(String),
}

/// Uniform grid on `T^d = R^d / Z^d`, `d ∈ {1, 2, 3}`, even sizes `≥ 8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    sizes: [usize; MAX_DIM],
}

impl TorusGrid {
    pub fn new(sizes: &[usize]) -> Result<Self, FieldError> {
        if sizes.is_empty() || sizes.len() > MAX_DIM {
            return Err(FieldError::InvalidGrid(format!(
                "dimension {} not in 1..={MAX_DIM}",
                sizes.len()
            )));
        }
        if let Some(n) = sizes.iter().find(|&&n| n < 8 || n % 2 != 0) {
            return Err(FieldError::InvalidGrid(format!(
                "axis size {n} must be even and at least 8"
            )));
        }
        let mut s = [1; MAX_DIM];
        s[..sizes.len()].copy_from_slice(sizes);
        Ok(TorusGrid {
            dim: sizes.len(),
            sizes: s,
        })
    }

    /// Same size `n` along each of `dim` axes.
    pub fn cube(dim: usize, n: usize) -> Result<Self, FieldError> {
        Self::new(&vec![n; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes[..self.dim]
    }

    pub fn len(&self) -> usize {
        self.sizes().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn strides(&self) -> [usize; MAX_DIM] {
        let mut st = [1; MAX_DIM];
        for a in (0..self.dim.saturating_sub(1)).rev() {
            st[a] = st[a + 1] * self.sizes[a + 1];
        }
        st
    }

    pub fn multi_index(&self, mut index: usize) -> [usize; MAX_DIM] {
        let mut k = [0; MAX_DIM];
        for a in (0..self.dim).rev() {
            k[a] = index % self.sizes[a];
            index /= self.sizes[a];
        }
        k
    }

    pub fn point(&self, index: usize) -> Vec<f64> {
        let k = self.multi_index(index);
        (0..self.dim)
            .map(|a| k[a] as f64 / self.sizes[a] as f64)
            .collect()
    }

    /// Signed frequency of FFT index `k` on an axis of size `n`; the Nyquist
    /// index `n/2` maps to `+n/2`.
    pub fn frequency(k: usize, n: usize) -> i64 {
        if k <= n / 2 {
            k as i64
        } else {
            k as i64 - n as i64
        }
    }

    /// Largest resolved angular wavenumber `2π·n/2` over all axes.
    pub fn max_wavenumber(&self) -> f64 {
        PI * *self.sizes().iter().max().unwrap_or(&1) as f64
    }
}

fn planner() -> &'static Mutex<FftPlanner<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut p = planner().lock().unwrap_or_else(|e| e.into_inner());
    if inverse {
        p.plan_fft_inverse(n)
    } else {
        p.plan_fft_forward(n)
    }
}

/// Unnormalized in-place multidimensional DFT.
fn fft_nd(grid: &TorusGrid, data: &mut [Complex64], inverse: bool) {
    let strides = grid.strides();
    let total = grid.len();
    for axis in 0..grid.dim() {
        let n = grid.sizes[axis];
        let stride = strides[axis];
        let fft = plan(n, inverse);
        let lines = total / n;
        let mut buf = vec![Complex64::new(0.0, 0.0); total];
        // gather lines contiguously
        let mut line = 0;
        for outer in 0..total / (n * stride) {
            for inner in 0..stride {
                let base = outer * n * stride + inner;
                for k in 0..n {
                    buf[line * n + k] = data[base + k * stride];
                }
                line += 1;
            }
        }
        debug_assert_eq!(line, lines);
        fft.process(&mut buf);
        let mut line = 0;
        for outer in 0..total / (n * stride) {
            for inner in 0..stride {
                let base = outer * n * stride + inner;
                for k in 0..n {
                    data[base + k * stride] = buf[line * n + k];
                }
                line += 1;
            }
        }
    }
}

/// Real samples of a periodic function on a [`TorusGrid`].
#[derive(Debug, Clone)]
pub struct ScalarField {
    grid: TorusGrid,
    values: Vec<f64>,
    spectrum: OnceLock<Vec<Complex64>>,
}

impl PartialEq for ScalarField {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid && self.values == other.values
    }
}

impl ScalarField {
    pub fn from_values(grid: TorusGrid, values: Vec<f64>) -> Result<Self, FieldError> {
        if values.len() != grid.len() {
            return Err(FieldError::Layout(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(ScalarField {
            grid,
            values,
            spectrum: OnceLock::new(),
        })
    }

    pub fn from_fn(grid: TorusGrid, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.point(i))).collect();
        ScalarField {
            grid,
            values,
            spectrum: OnceLock::new(),
        }
    }

    pub fn constant(grid: TorusGrid, c: f64) -> Self {
        ScalarField {
            grid,
            values: vec![c; grid.len()],
            spectrum: OnceLock::new(),
        }
    }

    pub fn zeros(grid: TorusGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Inverse of [`ScalarField::spectrum`]; imaginary parts are discarded.
    pub fn from_spectrum(grid: TorusGrid, mut coeffs: Vec<Complex64>) -> Self {
        fft_nd(&grid, &mut coeffs, true);
        let values = coeffs.iter().map(|c| c.re).collect();
        ScalarField {
            grid,
            values,
            spectrum: OnceLock::new(),
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Normalized discrete Fourier coefficients, computed once.
    pub fn spectrum(&self) -> &[Complex64] {
        self.spectrum.get_or_init(|| {
            let mut data: Vec<Complex64> = self.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft_nd(&self.grid, &mut data, false);
            let scale = 1.0 / self.grid.len() as f64;
            data.iter_mut().for_each(|c| *c *= scale);
            data
        })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn check_grid(&self, other: &ScalarField) -> Result<(), FieldError> {
        if self.grid != other.grid {
            return Err(FieldError::GridMismatch);
        }
        Ok(())
    }

    fn zip(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Result<ScalarField, FieldError> {
        self.check_grid(other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(ScalarField {
            grid: self.grid,
            values,
            spectrum: OnceLock::new(),
        })
    }

    pub fn add(&self, other: &ScalarField) -> Result<ScalarField, FieldError> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ScalarField) -> Result<ScalarField, FieldError> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &ScalarField) -> Result<ScalarField, FieldError> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> ScalarField {
        self.map(|v| c * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
            spectrum: OnceLock::new(),
        }
    }

    /// Max-norm distance to another field on the same grid.
    pub fn max_diff(&self, other: &ScalarField) -> Result<f64, FieldError> {
        self.check_grid(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Multiplies every Fourier mode by `symbol(freqs, nyquist_mask)`.
    fn apply_multiplier(&self, symbol: impl Fn(&[i64; MAX_DIM], &[bool; MAX_DIM]) -> Complex64) -> ScalarField {
        let spec = self.spectrum();
        let g = self.grid;
        let mut out = Vec::with_capacity(spec.len());
        for (idx, c) in spec.iter().enumerate() {
            let k = g.multi_index(idx);
            let mut freq = [0i64; MAX_DIM];
            let mut nyq = [false; MAX_DIM];
            for a in 0..g.dim() {
                freq[a] = TorusGrid::frequency(k[a], g.sizes[a]);
                nyq[a] = k[a] == g.sizes[a] / 2;
            }
            out.push(c * symbol(&freq, &nyq));
        }
        // coefficients are normalized; the inverse transform is an unnormalized sum
        ScalarField::from_spectrum(g, out)
    }

    /// Spectral `∂/∂y_axis` (axis is 0-based); the Nyquist mode is zeroed.
    pub fn partial_derivative(&self, axis: usize) -> ScalarField {
        assert!(axis < self.grid.dim(), "axis {axis} out of range");
        self.apply_multiplier(|k, nyq| {
            if nyq[axis] {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(0.0, 2.0 * PI * k[axis] as f64)
            }
        })
    }

    /// Removes every Fourier mode that sits on a Nyquist index of some axis.
    pub fn without_nyquist(&self) -> ScalarField {
        self.apply_multiplier(|_, nyq| {
            if nyq.iter().any(|&b| b) {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(1.0, 0.0)
            }
        })
    }

    /// Spectral Laplacian with symbol `-4π²|k|²` (Nyquist modes kept).
    pub fn laplacian(&self) -> ScalarField {
        let d = self.grid.dim();
        self.apply_multiplier(|k, _| {
            let k2: f64 = (0..d).map(|a| (k[a] * k[a]) as f64).sum();
            Complex64::new(-4.0 * PI * PI * k2, 0.0)
        })
    }

    pub fn gradient(&self) -> VectorField {
        VectorField {
            comps: (0..self.grid.dim()).map(|a| self.partial_derivative(a)).collect(),
        }
    }

    /// Trigonometric interpolant evaluated at an arbitrary point.
    ///
    /// Agrees with the samples at grid nodes; the Nyquist mode is read as a
    /// cosine so the interpolant stays real.
    pub fn interpolate(&self, y: &[f64]) -> f64 {
        let g = self.grid;
        let spec = self.spectrum();
        let phases: Vec<Vec<Complex64>> = (0..g.dim())
            .map(|a| axis_phases(g.sizes[a], y[a]))
            .collect();
        let mut acc = 0.0;
        for (idx, c) in spec.iter().enumerate() {
            let k = g.multi_index(idx);
            let mut p = *c;
            for a in 0..g.dim() {
                p *= phases[a][k[a]];
            }
            acc += p.re;
        }
        acc
    }

    /// Band-limited resampling onto a finer grid (zero padding in Fourier space).
    pub fn refine(&self, sizes: &[usize]) -> Result<ScalarField, FieldError> {
        let fine = TorusGrid::new(sizes)?;
        if fine.dim() != self.grid.dim() || (0..fine.dim()).any(|a| fine.sizes[a] < self.grid.sizes[a]) {
            return Err(FieldError::InvalidGrid("refinement must not coarsen".into()));
        }
        let g = self.grid;
        let spec = self.spectrum();
        let mut out = vec![Complex64::new(0.0, 0.0); fine.len()];
        let fstrides = fine.strides();
        for (idx, c) in spec.iter().enumerate() {
            let k = g.multi_index(idx);
            // a Nyquist index splits evenly between +n/2 and -n/2 on the finer grid
            let mut targets: Vec<(usize, f64)> = vec![(0, 1.0)];
            for a in 0..g.dim() {
                let n = g.sizes[a];
                let nf = fine.sizes[a];
                let f = TorusGrid::frequency(k[a], n);
                let opts: Vec<(i64, f64)> = if k[a] == n / 2 {
                    vec![(f, 0.5), (-f, 0.5)]
                } else {
                    vec![(f, 1.0)]
                };
                let mut next = Vec::new();
                for (off, w) in &targets {
                    for (fr, wf) in &opts {
                        let kf = fr.rem_euclid(nf as i64) as usize;
                        next.push((off + kf * fstrides[a], w * wf));
                    }
                }
                targets = next;
            }
            for (t, w) in targets {
                out[t] += c * w;
            }
        }
        Ok(ScalarField::from_spectrum(fine, out))
    }
}

fn axis_phases(n: usize, y: f64) -> Vec<Complex64> {
    (0..n)
        .map(|k| {
            if k == n / 2 {
                Complex64::new((PI * n as f64 * y).cos(), 0.0)
            } else {
                let theta = 2.0 * PI * TorusGrid::frequency(k, n) as f64 * y;
                Complex64::new(theta.cos(), theta.sin())
            }
        })
        .collect()
}

/// Solves `Δh = rhs` on the torus with `mean(h) = 0`.
pub fn solve_poisson_torus(rhs: &ScalarField, tol: f64) -> Result<ScalarField, FieldError> {
    let mean = rhs.mean();
    if mean.abs() > tol {
        return Err(FieldError::NonZeroMean { mean, tol });
    }
    let d = rhs.grid().dim();
    Ok(rhs.apply_multiplier(|k, _| {
        let k2: f64 = (0..d).map(|a| (k[a] * k[a]) as f64).sum();
        if k2 == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::new(-1.0 / (4.0 * PI * PI * k2), 0.0)
        }
    }))
}

/// `d` component fields on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    comps: Vec<ScalarField>,
}

impl VectorField {
    pub fn new(comps: Vec<ScalarField>) -> Result<Self, FieldError> {
        let Some(first) = comps.first() else {
            return Err(FieldError::Layout("empty vector field".into()));
        };
        if comps.len() != first.grid().dim() {
            return Err(FieldError::Layout(format!(
                "{} components on a {}-dimensional grid",
                comps.len(),
                first.grid().dim()
            )));
        }
        if comps.iter().any(|c| c.grid() != first.grid()) {
            return Err(FieldError::GridMismatch);
        }
        Ok(VectorField { comps })
    }

    pub fn zeros(grid: TorusGrid) -> Self {
        VectorField {
            comps: (0..grid.dim()).map(|_| ScalarField::zeros(grid)).collect(),
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        self.comps[0].grid()
    }

    pub fn dim(&self) -> usize {
        self.comps.len()
    }

    pub fn comp(&self, i: usize) -> &ScalarField {
        &self.comps[i]
    }

    pub fn comps(&self) -> &[ScalarField] {
        &self.comps
    }

    pub fn divergence(&self) -> ScalarField {
        let mut acc = self.comps[0].partial_derivative(0);
        for (a, c) in self.comps.iter().enumerate().skip(1) {
            acc = acc.add(&c.partial_derivative(a)).expect("shared grid");
        }
        acc
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().map(ScalarField::max_abs).fold(0.0, f64::max)
    }

    pub fn scale_by(&self, s: &ScalarField) -> Result<VectorField, FieldError> {
        Ok(VectorField {
            comps: self.comps.iter().map(|c| c.mul(s)).collect::<Result<_, _>>()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Symmetry {
    General,
    Symmetric,
    Antisymmetric,
}

/// `d×d` component fields, row-major, with an exact symmetry flag.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    dim: usize,
    comps: Vec<ScalarField>,
    symmetry: Symmetry,
}

impl MatrixField {
    /// Validates layout and, for flagged symmetry, that the components satisfy
    /// it bit for bit.
    pub fn new(comps: Vec<ScalarField>, symmetry: Symmetry) -> Result<Self, FieldError> {
        let Some(first) = comps.first() else {
            return Err(FieldError::Layout("empty matrix field".into()));
        };
        let d = first.grid().dim();
        if comps.len() != d * d {
            return Err(FieldError::Layout(format!(
                "{} components for a {d}x{d} matrix field",
                comps.len()
            )));
        }
        if comps.iter().any(|c| c.grid() != first.grid()) {
            return Err(FieldError::GridMismatch);
        }
        for i in 0..d {
            for j in 0..d {
                let (a, b) = (&comps[i * d + j], &comps[j * d + i]);
                let ok = match symmetry {
                    Symmetry::General => true,
                    Symmetry::Symmetric => a.values() == b.values(),
                    Symmetry::Antisymmetric => a.values().iter().zip(b.values()).all(|(x, y)| *x == -*y),
                };
                if !ok {
                    return Err(FieldError::Layout(format!(
                        "component ({i},{j}) violates the {symmetry:?} flag"
                    )));
                }
            }
        }
        Ok(MatrixField { dim: d, comps, symmetry })
    }

    /// Averages `(A + Aᵀ)/2` and flags the result symmetric.
    pub fn symmetrized(comps: Vec<ScalarField>) -> Result<Self, FieldError> {
        let general = Self::new(comps, Symmetry::General)?;
        let d = general.dim;
        let mut out = general.comps.clone();
        for i in 0..d {
            for j in i + 1..d {
                let avg = general.get(i, j).add(general.get(j, i))?.scale(0.5);
                out[i * d + j] = avg.clone();
                out[j * d + i] = avg;
            }
        }
        Self::new(out, Symmetry::Symmetric)
    }

    pub fn identity(grid: TorusGrid) -> Self {
        let d = grid.dim();
        let comps = (0..d * d)
            .map(|k| ScalarField::constant(grid, if k / d == k % d { 1.0 } else { 0.0 }))
            .collect();
        MatrixField {
            dim: d,
            comps,
            symmetry: Symmetry::Symmetric,
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        self.comps[0].grid()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn symmetry(&self) -> Symmetry {
        self.symmetry
    }

    pub fn get(&self, i: usize, j: usize) -> &ScalarField {
        &self.comps[i * self.dim + j]
    }

    pub fn comps(&self) -> &[ScalarField] {
        &self.comps
    }

    /// Row divergence `(div A)_j = Σ_i ∂_i A_ij`.
    pub fn column_divergence(&self) -> VectorField {
        let d = self.dim;
        let comps = (0..d)
            .map(|j| {
                let mut acc = self.get(0, j).partial_derivative(0);
                for i in 1..d {
                    acc = acc.add(&self.get(i, j).partial_derivative(i)).expect("shared grid");
                }
                acc
            })
            .collect();
        VectorField { comps }
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().map(ScalarField::max_abs).fold(0.0, f64::max)
    }

    /// Matrix at one node.
    pub fn at(&self, node: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j).values()[node])
    }

    pub fn scale_by(&self, s: &ScalarField) -> Result<MatrixField, FieldError> {
        let comps = self.comps.iter().map(|c| c.mul(s)).collect::<Result<Vec<_>, _>>()?;
        Ok(MatrixField {
            dim: self.dim,
            comps,
            symmetry: self.symmetry,
        })
    }

    /// Smallest eigenvalue of the symmetric part over all nodes, with its node.
    pub fn min_sym_eigenvalue(&self) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for node in 0..self.grid().len() {
            let m = self.at(node);
            let s = (&m + m.transpose()) * 0.5;
            let ev = SymmetricEigen::new(s).eigenvalues.min();
            if ev < best.0 {
                best = (ev, node);
            }
        }
        best
    }
}

/// Per-node symmetric positive-definite square root of a symmetric field.
pub fn pointwise_matrix_sqrt(field: &MatrixField, lambda: f64) -> Result<MatrixField, FieldError> {
    if field.symmetry() != Symmetry::Symmetric {
        return Err(FieldError::NotSymmetric);
    }
    let d = field.dim();
    let grid = *field.grid();
    let mut out = vec![vec![0.0; grid.len()]; d * d];
    for node in 0..grid.len() {
        let eig = SymmetricEigen::new(field.at(node));
        let min = eig.eigenvalues.min();
        if !(min >= lambda) {
            return Err(FieldError::Ellipticity {
                node,
                point: grid.point(node),
                eigenvalue: min,
                lambda,
            });
        }
        let root = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
            * eig.eigenvectors.transpose();
        for i in 0..d {
            for j in 0..d {
                // copy the upper triangle so the flag holds exactly
                let (r, c) = if i <= j { (i, j) } else { (j, i) };
                out[i * d + j][node] = root[(r, c)];
            }
        }
    }
    let comps = out
        .into_iter()
        .map(|v| ScalarField::from_values(grid, v))
        .collect::<Result<Vec<_>, _>>()?;
    MatrixField::new(comps, Symmetry::Symmetric)
}
