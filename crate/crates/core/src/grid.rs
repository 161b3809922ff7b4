//! Discrete calculus on the uniform interior grid of the unit square/cube.
//!
//! Nodes sit at `x = (i + 1) h`, `i = 0..n`, `h = 1 / (n + 1)`, axis 0 fastest
//! in the flat storage. Fields vanish outside the interior nodes (zero
//! extension), which makes the central-difference gradient and divergence
//! exact negative adjoints under the pairing `h^d Σ a b`.

use std::fmt;

use nalgebra::{DMatrix, DMatrixView};

use crate::error::{Error, Result};
use crate::physics::MediumMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dim: usize,
    n: usize,
    h: f64,
}

impl Grid {
    /// `n` interior nodes per axis. The central-difference gradient is
    /// injective only for even `n`, so odd counts are rejected.
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::invalid(format!("grid dimension must be 2 or 3, got {dim}")));
        }
        if n < 4 {
            return Err(Error::invalid(format!("grid needs n >= 4 interior nodes, got {n}")));
        }
        if n % 2 != 0 {
            return Err(Error::invalid(format!(
                "grid needs an even number of interior nodes per axis, got {n}"
            )));
        }
        Ok(Self { dim, n, h: 1.0 / (n as f64 + 1.0) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Number of interior nodes, `n^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Quadrature weight `h^d` of one node.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.n.pow(axis as u32)
    }

    /// Axis index of flat node `idx`.
    #[inline]
    pub fn axis_index(&self, idx: usize, axis: usize) -> usize {
        (idx / self.stride(axis)) % self.n
    }

    /// Physical coordinates of node `idx`.
    pub fn coords(&self, idx: usize) -> [f64; 3] {
        let mut x = [0.0; 3];
        for (a, xa) in x.iter_mut().enumerate().take(self.dim) {
            *xa = (self.axis_index(idx, a) as f64 + 1.0) * self.h;
        }
        x
    }

    /// Eigenvalue of `-Δ` (5-point/7-point, Dirichlet) for the sine mode with
    /// 1-based wave numbers `k`.
    pub fn laplacian_eigenvalue(&self, k: &[usize]) -> f64 {
        k.iter()
            .map(|&ka| {
                let s = (ka as f64 * std::f64::consts::PI * self.h / 2.0).sin();
                4.0 / (self.h * self.h) * s * s
            })
            .sum()
    }

    /// Eigenvalues of `-Δ` for every node of the sine basis, in the same flat
    /// order as the spectral coefficients.
    pub fn laplacian_spectrum(&self) -> Vec<f64> {
        let mut k = vec![0usize; self.dim];
        (0..self.len())
            .map(|idx| {
                for (a, ka) in k.iter_mut().enumerate() {
                    *ka = self.axis_index(idx, a) + 1;
                }
                self.laplacian_eigenvalue(&k)
            })
            .collect()
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch { left: self.to_string(), right: other.to_string() })
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.dim == 2 {
            write!(f, "{}x{}", self.n, self.n)
        } else {
            write!(f, "{}x{}x{}", self.n, self.n, self.n)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self { grid, values: vec![c; grid.len()] }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "scalar field on {grid} needs {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("scalar field contains non-finite values"));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Discrete L² pairing `h^d Σ a b`.
    pub fn dot(&self, other: &ScalarField) -> f64 {
        debug_assert_eq!(self.grid, other.grid);
        self.grid.cell_volume() * dot(&self.values, &other.values)
    }

    pub fn norm_l2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|v| a * v).collect() }
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &ScalarField) {
        axpy(&mut self.values, a, &x.values);
    }

    pub fn add(&self, other: &ScalarField) -> Self {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &ScalarField) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }
}

/// A `d`-component field stored component-major: component `c` occupies
/// `values[c * N .. (c + 1) * N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: Grid,
    values: Vec<f64>,
}

impl VectorField {
    pub fn zeros(grid: Grid) -> Self {
        Self { grid, values: vec![0.0; grid.dim() * grid.len()] }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.dim() * grid.len() {
            return Err(Error::invalid(format!(
                "vector field on {grid} needs {} values, got {}",
                grid.dim() * grid.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("vector field contains non-finite values"));
        }
        Ok(Self { grid, values })
    }

    pub fn from_components(components: &[ScalarField]) -> Result<Self> {
        let grid = *components
            .first()
            .ok_or_else(|| Error::invalid("vector field needs at least one component"))?
            .grid();
        if components.len() != grid.dim() {
            return Err(Error::invalid(format!(
                "vector field on {grid} needs {} components, got {}",
                grid.dim(),
                components.len()
            )));
        }
        let mut values = Vec::with_capacity(grid.dim() * grid.len());
        for c in components {
            grid.check_same(c.grid())?;
            values.extend_from_slice(c.values());
        }
        Ok(Self { grid, values })
    }

    /// Builds a field from a function returning all components at a point.
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let n = grid.len();
        let mut values = vec![0.0; grid.dim() * n];
        for i in 0..n {
            let v = f(grid.coords(i));
            for c in 0..grid.dim() {
                values[c * n + i] = v[c];
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn component_field(&self, c: usize) -> ScalarField {
        ScalarField { grid: self.grid, values: self.component(c).to_vec() }
    }

    /// Vector value at node `i`.
    #[inline]
    pub fn at(&self, i: usize) -> [f64; 3] {
        let n = self.grid.len();
        let mut v = [0.0; 3];
        for (c, vc) in v.iter_mut().enumerate().take(self.grid.dim()) {
            *vc = self.values[c * n + i];
        }
        v
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: [f64; 3]) {
        let n = self.grid.len();
        for (c, vc) in v.iter().enumerate().take(self.grid.dim()) {
            self.values[c * n + i] = *vc;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Plain discrete L² pairing `h^d Σ_nodes U·V`.
    pub fn dot(&self, other: &VectorField) -> f64 {
        debug_assert_eq!(self.grid, other.grid);
        self.grid.cell_volume() * dot(&self.values, &other.values)
    }

    pub fn norm_l2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|v| a * v).collect() }
    }

    pub fn axpy(&mut self, a: f64, x: &VectorField) {
        axpy(&mut self.values, a, &x.values);
    }

    pub fn add(&self, other: &VectorField) -> Self {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &VectorField) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// Pointwise `D·U`.
    pub fn apply_medium(&self, d: &MediumMatrix) -> VectorField {
        let dim = self.grid.dim();
        let n = self.grid.len();
        let mut out = VectorField::zeros(self.grid);
        for r in 0..dim {
            let dst = &mut out.values[r * n..(r + 1) * n];
            for c in 0..dim {
                let coef = d.get(r, c);
                if coef != 0.0 {
                    axpy(dst, coef, &self.values[c * n..(c + 1) * n]);
                }
            }
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Central difference along `axis` with zero extension, written into `out`.
pub(crate) fn central_diff(grid: &Grid, axis: usize, src: &[f64], out: &mut [f64]) {
    let n = grid.n();
    let s = grid.stride(axis);
    let inv = 0.5 / grid.h();
    for (idx, o) in out.iter_mut().enumerate() {
        let i = (idx / s) % n;
        let fwd = if i + 1 < n { src[idx + s] } else { 0.0 };
        let bwd = if i > 0 { src[idx - s] } else { 0.0 };
        *o = (fwd - bwd) * inv;
    }
}

/// 5-point (2D) / 7-point (3D) Dirichlet Laplacian of a scalar array.
pub(crate) fn scalar_laplacian(grid: &Grid, src: &[f64], out: &mut [f64]) {
    let n = grid.n();
    let dim = grid.dim();
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    let strides: [usize; 3] = [1, n, n * n];
    for (idx, o) in out.iter_mut().enumerate() {
        let centre = src[idx];
        let mut acc = -2.0 * dim as f64 * centre;
        for &s in strides.iter().take(dim) {
            let i = (idx / s) % n;
            if i + 1 < n {
                acc += src[idx + s];
            }
            if i > 0 {
                acc += src[idx - s];
            }
        }
        *o = acc * inv_h2;
    }
}

/// Central-difference gradient with zero extension.
pub fn grad(p: &ScalarField) -> VectorField {
    let grid = p.grid;
    let n = grid.len();
    let mut out = VectorField::zeros(grid);
    for a in 0..grid.dim() {
        central_diff(&grid, a, &p.values, &mut out.values[a * n..(a + 1) * n]);
    }
    out
}

/// Central-difference divergence with zero extension; `div = -gradᵀ`.
pub fn div(u: &VectorField) -> ScalarField {
    let grid = u.grid;
    let n = grid.len();
    let mut out = ScalarField::zeros(grid);
    let mut tmp = vec![0.0; n];
    for a in 0..grid.dim() {
        central_diff(&grid, a, u.component(a), &mut tmp);
        axpy(&mut out.values, 1.0, &tmp);
    }
    out
}

/// Componentwise Dirichlet Laplacian.
pub fn laplacian(u: &VectorField) -> VectorField {
    let grid = u.grid;
    let n = grid.len();
    let mut out = VectorField::zeros(grid);
    for c in 0..grid.dim() {
        scalar_laplacian(&grid, &u.values[c * n..(c + 1) * n], &mut out.values[c * n..(c + 1) * n]);
    }
    out
}

/// Scalar Dirichlet Laplacian (used for spectral checks of pressure-like fields).
pub fn laplacian_scalar(p: &ScalarField) -> ScalarField {
    let mut out = ScalarField::zeros(p.grid);
    scalar_laplacian(&p.grid, &p.values, &mut out.values);
    out
}

/// `h^d Σ_nodes (D U)·V`.
pub fn weighted_inner(d: &MediumMatrix, u: &VectorField, v: &VectorField) -> Result<f64> {
    u.grid.check_same(&v.grid)?;
    if d.dim() != u.grid.dim() {
        return Err(Error::invalid(format!(
            "medium matrix is {0}x{0} but the grid is {1}-dimensional",
            d.dim(),
            u.grid.dim()
        )));
    }
    Ok(u.apply_medium(d).dot(v))
}

pub fn project_mean_zero(p: &ScalarField) -> ScalarField {
    let m = p.mean();
    ScalarField { grid: p.grid, values: p.values.iter().map(|v| v - m).collect() }
}

pub(crate) fn project_mean_zero_in_place(values: &mut [f64]) {
    let m = values.iter().sum::<f64>() / values.len() as f64;
    for v in values.iter_mut() {
        *v -= m;
    }
}

/// Orthonormal sine transform (DST-I) applied along every axis. The
/// transform is symmetric and involutory.
#[derive(Debug, Clone)]
pub struct SineBasis {
    grid: Grid,
    matrix: DMatrix<f64>,
    eigenvalues: Vec<f64>,
}

impl SineBasis {
    pub fn new(grid: Grid) -> Self {
        let n = grid.n();
        let scale = (2.0 / (n as f64 + 1.0)).sqrt();
        let matrix = DMatrix::from_fn(n, n, |j, k| {
            scale * (((j + 1) * (k + 1)) as f64 * std::f64::consts::PI / (n as f64 + 1.0)).sin()
        });
        Self { grid, matrix, eigenvalues: grid.laplacian_spectrum() }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Eigenvalues of `-Δ` aligned with [`SineBasis::forward`] coefficients.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Coefficients in the orthonormal (Euclidean) sine basis.
    pub fn forward(&self, values: &[f64]) -> Vec<f64> {
        let mut out = values.to_vec();
        let mut tmp = DMatrix::zeros(0, 0);
        for axis in 0..self.grid.dim() {
            self.transform_axis(&mut out, axis, &mut tmp);
        }
        out
    }

    /// Inverse of [`SineBasis::forward`] (the same transform).
    pub fn inverse(&self, coeffs: &[f64]) -> Vec<f64> {
        self.forward(coeffs)
    }

    // Each block of `n·s` values is a column-major `s × n` matrix whose
    // columns run along `axis`; the transform multiplies it from the right
    // (the sine matrix is symmetric).
    fn transform_axis(&self, data: &mut [f64], axis: usize, tmp: &mut DMatrix<f64>) {
        let n = self.grid.n();
        let s = self.grid.stride(axis);
        if axis == 0 {
            let cols = data.len() / n;
            let x = DMatrixView::from_slice(data, n, cols);
            *tmp = &self.matrix * x;
            data.copy_from_slice(tmp.as_slice());
            return;
        }
        for block in data.chunks_mut(n * s) {
            let y = DMatrixView::from_slice(block, s, n);
            *tmp = y * &self.matrix;
            block.copy_from_slice(tmp.as_slice());
        }
    }

    /// `sqrt(h^d Σ λ_j^s c_j²)` for an arbitrary real exponent `s`.
    pub fn spectral_norm(&self, values: &[f64], s: f64) -> f64 {
        let c = self.forward(values);
        let acc: f64 = c
            .iter()
            .zip(&self.eigenvalues)
            .map(|(ci, li)| if s == 0.0 { ci * ci } else { li.powf(s) * ci * ci })
            .sum();
        (self.grid.cell_volume() * acc).sqrt()
    }

    /// Spectral norm of each component of a vector field, combined in ℓ².
    pub fn spectral_norm_vector(&self, u: &VectorField, s: f64) -> f64 {
        (0..self.grid.dim())
            .map(|c| self.spectral_norm(u.component(c), s).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Discrete `H^δ` norm `sqrt(Σ λ_j^δ c_j²)` through the Dirichlet sine basis.
pub fn sobolev_norm(f: &ScalarField, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(SineBasis::new(f.grid).spectral_norm(&f.values, delta))
}

/// `H^δ` norm of a vector field (componentwise, ℓ²-combined).
pub fn sobolev_norm_vector(u: &VectorField, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(SineBasis::new(u.grid).spectral_norm_vector(u, delta))
}

/// Whether `delta` falls inside the fractional range for which the pressure
/// estimates are stated (`δ < 1/2`, and `δ = 1`); `δ = 1/2` is flagged.
pub fn delta_in_stated_range(delta: f64) -> bool {
    (0.0..0.5).contains(&delta) || (0.5..=1.0).contains(&delta) && delta != 0.5
}

fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&delta) || delta.is_nan() {
        return Err(Error::invalid(format!("Sobolev exponent must lie in [0, 1], got {delta}")));
    }
    Ok(())
}
