//! Constitutive content of the model: the Forchheimer nonlinearity
//! `f(u) = φ(|u|²) u`, its potential and Jacobian, the medium matrix `D`,
//! forcing, energy functionals, the discrete Bogovski right inverse of the
//! divergence, and the skew-symmetrized convective term.

use std::cell::RefCell;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::grid::{
    central_diff, div, grad, laplacian, project_mean_zero, Grid, ScalarField, SineBasis,
    VectorField,
};
use crate::linalg::{conjugate_gradient, CgOptions, DirichletPoisson};

/// Constant symmetric positive definite medium matrix `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct MediumMatrix {
    dim: usize,
    entries: [[f64; 3]; 3],
    eig_min: f64,
    eig_max: f64,
}

impl MediumMatrix {
    /// Row-major `dim × dim` entries.
    pub fn new(dim: usize, entries: &[f64]) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::invalid(format!("medium matrix must be 2x2 or 3x3, got dim {dim}")));
        }
        if entries.len() != dim * dim {
            return Err(Error::invalid(format!(
                "medium matrix needs {} entries, got {}",
                dim * dim,
                entries.len()
            )));
        }
        let mut e = [[0.0; 3]; 3];
        for r in 0..dim {
            for c in 0..dim {
                e[r][c] = entries[r * dim + c];
            }
        }
        let scale = entries.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for r in 0..dim {
            for c in 0..r {
                if (e[r][c] - e[c][r]).abs() > 1e-14 * scale.max(1.0) {
                    return Err(Error::invalid(format!(
                        "medium matrix must be symmetric: D[{r}][{c}] = {} but D[{c}][{r}] = {}",
                        e[r][c], e[c][r]
                    )));
                }
            }
        }
        let m = DMatrix::from_fn(dim, dim, |r, c| e[r][c]);
        let eig = SymmetricEigen::new(m).eigenvalues;
        let eig_min = eig.min();
        let eig_max = eig.max();
        if !(eig_min > 0.0) {
            return Err(Error::invalid(format!(
                "medium matrix must be positive definite, smallest eigenvalue is {eig_min}"
            )));
        }
        Ok(Self { dim, entries: e, eig_min, eig_max })
    }

    pub fn identity(dim: usize) -> Self {
        let mut e = vec![0.0; dim * dim];
        for i in 0..dim {
            e[i * dim + i] = 1.0;
        }
        Self::new(dim, &e).expect("identity is SPD")
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let dim = diag.len();
        let mut e = vec![0.0; dim * dim];
        for (i, d) in diag.iter().enumerate() {
            e[i * dim + i] = *d;
        }
        Self::new(dim, &e)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r][c]
    }

    /// Smallest eigenvalue (`α₁` of the coercivity bound).
    pub fn eig_min(&self) -> f64 {
        self.eig_min
    }

    pub fn eig_max(&self) -> f64 {
        self.eig_max
    }

    pub fn is_identity(&self) -> bool {
        (0..self.dim).all(|r| (0..self.dim).all(|c| self.entries[r][c] == if r == c { 1.0 } else { 0.0 }))
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        let e: Vec<f64> = (0..self.dim * self.dim)
            .map(|i| s * self.entries[i / self.dim][i % self.dim])
            .collect();
        Self::new(self.dim, &e)
    }

    pub fn row_major(&self) -> Vec<f64> {
        (0..self.dim * self.dim).map(|i| self.entries[i / self.dim][i % self.dim]).collect()
    }

    /// Row-major entries of `D⁻¹`.
    pub fn inverse_row_major(&self) -> Vec<f64> {
        let m = DMatrix::from_row_slice(self.dim, self.dim, &self.row_major());
        let inv = m.try_inverse().expect("SPD matrix is invertible");
        (0..self.dim * self.dim).map(|i| inv[(i / self.dim, i % self.dim)]).collect()
    }
}

/// Coefficients of `φ(z) = alpha + beta z^l + gamma √z`.
///
/// `alpha` may be negative: the admissible class only bounds `φ` below by
/// `-C + α z^l`, and a negative linear part is what makes the monotone
/// shift nontrivial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonlinearityParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub l: f64,
    shift: f64,
}

impl NonlinearityParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64, l: f64) -> Result<Self> {
        if !(l > 0.0 && l <= 2.0) {
            return Err(Error::invalid(format!("growth exponent l must lie in (0, 2], got {l}")));
        }
        if !(beta >= 0.0) || !(gamma >= 0.0) || !alpha.is_finite() {
            return Err(Error::invalid(format!(
                "nonlinearity needs beta >= 0, gamma >= 0 and finite alpha (got alpha={alpha}, beta={beta}, gamma={gamma})"
            )));
        }
        Ok(Self { alpha, beta, gamma, l, shift: 0.0 })
    }

    /// `f ≡ 0`.
    pub fn linear() -> Self {
        Self { alpha: 0.0, beta: 0.0, gamma: 0.0, l: 1.0, shift: 0.0 }
    }

    /// The quintic Forchheimer law `φ(z) = 1 + z²`.
    pub fn quintic() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma: 0.0, l: 2.0, shift: 0.0 }
    }

    pub fn is_zero(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0
    }

    /// Growth conditions needed for a dissipative estimate: `β > 0` when
    /// `l > 1/2`, `β + γ > 0` when `l = 1/2`.
    pub fn is_dissipative(&self) -> bool {
        if self.l > 0.5 {
            self.beta > 0.0
        } else if self.l == 0.5 {
            self.beta + self.gamma > 0.0
        } else {
            false
        }
    }

    /// Cached monotone shift `L` (zero unless set).
    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// Certifies and caches the monotone shift for amplitudes up to `u_max`.
    pub fn with_certified_shift(mut self, u_max: f64) -> Result<Self> {
        self.shift = monotone_shift(&self, u_max)?;
        Ok(self)
    }

    #[inline]
    pub(crate) fn phi_unchecked(&self, z: f64) -> f64 {
        let mut v = self.alpha;
        if self.beta != 0.0 {
            v += self.beta * z.powf(self.l);
        }
        if self.gamma != 0.0 {
            v += self.gamma * z.sqrt();
        }
        v
    }

    /// `z φ'(z)`, finite at `z = 0`.
    #[inline]
    pub(crate) fn z_dphi(&self, z: f64) -> f64 {
        let mut v = 0.0;
        if self.beta != 0.0 {
            v += self.beta * self.l * z.powf(self.l);
        }
        if self.gamma != 0.0 {
            v += 0.5 * self.gamma * z.sqrt();
        }
        v
    }

    /// Eigenvalues of the 3×3 (or 2×2) Jacobian `f'(v)` at `|v|² = z`:
    /// `φ(z)` on the directions orthogonal to `v`, `φ(z) + 2 z φ'(z)` along it.
    pub fn jacobian_eigenvalues(&self, z: f64) -> (f64, f64) {
        let phi = self.phi_unchecked(z);
        (phi, phi + 2.0 * self.z_dphi(z))
    }

    /// Pointwise `F(v) = ½ ∫₀^{|v|²} φ`.
    #[inline]
    pub(crate) fn potential_density(&self, z: f64) -> f64 {
        let mut v = self.alpha * z;
        if self.beta != 0.0 {
            v += self.beta * z.powf(self.l + 1.0) / (self.l + 1.0);
        }
        if self.gamma != 0.0 {
            v += 2.0 / 3.0 * self.gamma * z.powf(1.5);
        }
        0.5 * v
    }

    /// `f(v) = φ(|v|²) v` at one node.
    #[inline]
    pub fn f_point(&self, v: [f64; 3]) -> [f64; 3] {
        let z = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        let phi = self.phi_unchecked(z);
        [phi * v[0], phi * v[1], phi * v[2]]
    }

    /// `f'(u) w` at one node.
    #[inline]
    pub fn fprime_point(&self, u: [f64; 3], w: [f64; 3]) -> [f64; 3] {
        let z = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
        let phi = self.phi_unchecked(z);
        if z == 0.0 {
            return [phi * w[0], phi * w[1], phi * w[2]];
        }
        // 2 φ'(z) (u·w) u = 2 (z φ'(z)) (û·w) û
        let uw = (u[0] * w[0] + u[1] * w[1] + u[2] * w[2]) / z;
        let k = 2.0 * self.z_dphi(z) * uw;
        [phi * w[0] + k * u[0], phi * w[1] + k * u[1], phi * w[2] + k * u[2]]
    }
}

pub fn eval_phi(z: f64, params: &NonlinearityParams) -> Result<f64> {
    if !(z >= 0.0) {
        return Err(Error::invalid(format!("φ is defined for z >= 0, got {z}")));
    }
    Ok(params.phi_unchecked(z))
}

pub fn eval_f(u: &VectorField, params: &NonlinearityParams) -> VectorField {
    let mut out = VectorField::zeros(*u.grid());
    if params.is_zero() {
        return out;
    }
    for i in 0..u.grid().len() {
        out.set(i, params.f_point(u.at(i)));
    }
    out
}

/// `h^d Σ F(u(x))`.
pub fn eval_potential(u: &VectorField, params: &NonlinearityParams) -> f64 {
    let g = u.grid();
    let s: f64 = (0..g.len())
        .map(|i| {
            let v = u.at(i);
            params.potential_density(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
        })
        .sum();
    g.cell_volume() * s
}

/// Jacobian action `f'(u) v = φ(|u|²) v + 2 φ'(|u|²) (u·v) u`.
pub fn apply_fprime(u: &VectorField, v: &VectorField, params: &NonlinearityParams) -> Result<VectorField> {
    u.grid().check_same(v.grid())?;
    let mut out = VectorField::zeros(*u.grid());
    for i in 0..u.grid().len() {
        out.set(i, params.fprime_point(u.at(i), v.at(i)));
    }
    Ok(out)
}

/// Number of log-spaced amplitudes sampled by [`monotone_shift`].
const SHIFT_SAMPLES: usize = 1000;

/// Smallest `L >= 0` with `f'(v) + L I >= 0` for all `|v| <= u_max`.
///
/// The minimal Jacobian eigenvalue is sampled on a log grid of amplitudes,
/// the worst sample is refined by golden-section search on its bracket, and
/// the result is returned inflated by 1% so it certifies the whole range.
pub fn monotone_shift(params: &NonlinearityParams, u_max: f64) -> Result<f64> {
    if !(u_max > 0.0) || !u_max.is_finite() {
        return Err(Error::invalid(format!("u_max must be positive, got {u_max}")));
    }
    let eig_min = |r: f64| {
        let (a, b) = params.jacobian_eigenvalues(r * r);
        a.min(b)
    };
    let lo = u_max * 1e-9;
    let ratio = (u_max / lo).powf(1.0 / (SHIFT_SAMPLES - 1) as f64);
    let mut radii: Vec<f64> = Vec::with_capacity(SHIFT_SAMPLES + 1);
    radii.push(0.0);
    let mut r = lo;
    for _ in 0..SHIFT_SAMPLES {
        radii.push(r.min(u_max));
        r *= ratio;
    }
    let (mut worst_idx, mut worst) = (0, eig_min(0.0));
    for (i, &r) in radii.iter().enumerate() {
        let e = eig_min(r);
        if e < worst {
            worst = e;
            worst_idx = i;
        }
    }
    // Golden-section refinement on the neighbouring bracket.
    let mut a = radii[worst_idx.saturating_sub(1)];
    let mut b = radii[(worst_idx + 1).min(radii.len() - 1)];
    let gr = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let c = b - gr * (b - a);
        let d = a + gr * (b - a);
        if eig_min(c) < eig_min(d) {
            b = d;
        } else {
            a = c;
        }
    }
    worst = worst.min(eig_min(0.5 * (a + b)));
    if worst >= 0.0 {
        Ok(0.0)
    } else {
        Ok(-worst * 1.01)
    }
}

/// Forcing `g`: a time-independent field, optionally replaced by a piecewise
/// linear time series `g(t)`.
#[derive(Debug, Clone)]
pub struct Forcing {
    base: VectorField,
    time_series: Vec<(f64, VectorField)>,
}

impl Forcing {
    pub fn constant(base: VectorField) -> Self {
        Self { base, time_series: Vec::new() }
    }

    pub fn zero(grid: Grid) -> Self {
        Self::constant(VectorField::zeros(grid))
    }

    pub fn with_time_series(base: VectorField, series: Vec<(f64, VectorField)>) -> Result<Self> {
        for w in series.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::invalid("forcing time series must be strictly increasing in t"));
            }
        }
        for (_, g) in &series {
            base.grid().check_same(g.grid())?;
        }
        Ok(Self { base, time_series: series })
    }

    pub fn base(&self) -> &VectorField {
        &self.base
    }

    pub fn grid(&self) -> &Grid {
        self.base.grid()
    }

    pub fn is_time_dependent(&self) -> bool {
        !self.time_series.is_empty()
    }

    /// `g(t)`; clamps outside the series range.
    pub fn at(&self, t: f64) -> VectorField {
        let s = &self.time_series;
        if s.is_empty() {
            return self.base.clone();
        }
        if t <= s[0].0 {
            return s[0].1.clone();
        }
        if t >= s[s.len() - 1].0 {
            return s[s.len() - 1].1.clone();
        }
        let k = s.partition_point(|(ti, _)| *ti <= t);
        let (t0, g0) = &s[k - 1];
        let (t1, g1) = &s[k];
        let w = (t - t0) / (t1 - t0);
        let mut out = g0.scaled(1.0 - w);
        out.axpy(w, g1);
        out
    }
}

#[derive(Debug, Clone)]
pub struct BogovskiResult {
    pub field: VectorField,
    /// Set when the input had a nonzero mean that was projected away.
    pub projected: bool,
}

/// Discrete Bogovski operator: the minimum-`H¹`-seminorm `w` with zero
/// extension and `div w = p`,
///
/// ```text
/// w = -(-Δ)⁻¹ G M⁻¹ p,   M = Gᵀ (-Δ)⁻¹ G,
/// ```
///
/// with every inverse computed by conjugate gradients.
#[derive(Debug, Clone)]
pub struct Bogovski {
    poisson: DirichletPoisson,
    pub outer: CgOptions,
    pub inner: CgOptions,
}

impl Bogovski {
    pub fn new(grid: Grid) -> Self {
        Self {
            poisson: DirichletPoisson::new(grid),
            outer: CgOptions { tol: 1e-11, max_iter: 20_000 },
            inner: CgOptions { tol: 1e-14, max_iter: 500 },
        }
    }

    pub fn apply(&self, p: &ScalarField) -> Result<BogovskiResult> {
        let grid = *self.poisson.grid();
        grid.check_same(p.grid())?;
        let scale = p.norm_l2();
        let pm = project_mean_zero(p);
        let projected = p.mean().abs() > 1e-14 * scale.max(f64::MIN_POSITIVE);
        if pm.values().iter().all(|v| *v == 0.0) {
            return Ok(BogovskiResult { field: VectorField::zeros(grid), projected });
        }
        let failure: RefCell<Option<Error>> = RefCell::new(None);
        let inner_solve = |rhs: &VectorField| -> VectorField {
            match self.poisson.solve(rhs, self.inner) {
                Ok(v) => v,
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    VectorField::zeros(grid)
                }
            }
        };
        let mut z = vec![0.0; grid.len()];
        let outer = conjugate_gradient(
            |x, out| {
                let xf = ScalarField::from_values(grid, x.to_vec()).expect("sized");
                let w = inner_solve(&grad(&xf));
                // Gᵀ = -div
                let d = div(&w);
                for (o, v) in out.iter_mut().zip(d.values()) {
                    *o = -v;
                }
            },
            pm.values(),
            &mut z,
            self.outer,
        );
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        outer?;
        let zf = ScalarField::from_values(grid, z)?;
        let w = self.poisson.solve(&grad(&zf), self.inner)?;
        Ok(BogovskiResult { field: w.scaled(-1.0), projected })
    }
}

pub fn bogovski(p: &ScalarField) -> Result<BogovskiResult> {
    Bogovski::new(*p.grid()).apply(p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyReport {
    /// `‖u‖²_{L²_D} + ‖p‖²`
    pub e_plain: f64,
    /// `e_plain + 2 ε (u, 𝔅p)`
    pub e_eps: f64,
    pub eps: f64,
    /// `‖∇u‖²_{L²_D} = -(DΔu, u)`
    pub dissipation: f64,
    /// `(f(u), D u)`
    pub f_work: f64,
    /// `(g, D u)`
    pub g_work: f64,
}

/// `‖∇u‖²_{L²_D}` in the discrete form matching the Laplacian.
pub fn dissipation(u: &VectorField, d: &MediumMatrix) -> f64 {
    -laplacian(u).dot(&u.apply_medium(d))
}

pub fn energy_report(
    u: &VectorField,
    p: &ScalarField,
    g: &VectorField,
    d: &MediumMatrix,
    params: &NonlinearityParams,
    eps: f64,
) -> Result<EnergyReport> {
    EnergyEvaluator::new(*u.grid()).report(u, p, g, d, params, eps)
}

/// Reuses one Bogovski solver across many energy evaluations.
#[derive(Debug, Clone)]
pub struct EnergyEvaluator {
    bogovski: Bogovski,
}

impl EnergyEvaluator {
    pub fn new(grid: Grid) -> Self {
        Self { bogovski: Bogovski::new(grid) }
    }

    pub fn bogovski(&self) -> &Bogovski {
        &self.bogovski
    }

    pub fn report(
        &self,
        u: &VectorField,
        p: &ScalarField,
        g: &VectorField,
        d: &MediumMatrix,
        params: &NonlinearityParams,
        eps: f64,
    ) -> Result<EnergyReport> {
        if !(eps >= 0.0) {
            return Err(Error::invalid(format!("coupling eps must be >= 0, got {eps}")));
        }
        u.grid().check_same(p.grid())?;
        u.grid().check_same(g.grid())?;
        let du = u.apply_medium(d);
        let e_plain = du.dot(u) + p.dot(p);
        let coupling = if eps > 0.0 { u.dot(&self.bogovski.apply(p)?.field) } else { 0.0 };
        Ok(EnergyReport {
            e_plain,
            e_eps: e_plain + 2.0 * eps * coupling,
            eps,
            dissipation: -laplacian(u).dot(&du),
            f_work: eval_f(u, params).dot(&du),
            g_work: g.dot(&du),
        })
    }

    /// `(u, 𝔅p)`.
    pub fn coupling(&self, u: &VectorField, p: &ScalarField) -> Result<f64> {
        Ok(u.dot(&self.bogovski.apply(p)?.field))
    }
}

/// Largest `ε` keeping `½ e ≤ e + 2ε(u, 𝔅p) ≤ (3/2) e` for every sampled
/// pressure paired with *any* velocity. The worst velocity is parallel to
/// `D⁻¹𝔅p`, which turns the sandwich into `ε ‖𝔅p‖_{D⁻¹} ≤ ½ ‖p‖`; the
/// sampled velocities only fix the grid.
pub fn certify_eps(states: &[(VectorField, ScalarField)], d: &MediumMatrix) -> Result<f64> {
    let mut eps_star = f64::INFINITY;
    let Some((u0, _)) = states.first() else {
        return Ok(eps_star);
    };
    let grid = *u0.grid();
    let eval = EnergyEvaluator::new(grid);
    let d_inv = MediumMatrix::new(d.dim(), &d.inverse_row_major())?;
    for (_, p) in states {
        grid.check_same(p.grid())?;
        let b = eval.bogovski().apply(p)?.field;
        let b_norm = b.apply_medium(&d_inv).dot(&b).sqrt();
        if b_norm > 0.0 {
            eps_star = eps_star.min(0.5 * project_mean_zero(p).norm_l2() / b_norm);
        }
    }
    Ok(eps_star)
}

/// Skew-symmetrized convection `B(u, v) = (u·∇)v + ½ div(u) v`, realized as
/// `½ Σ_a [u_a ∂_a v + ∂_a(u_a v)]` so that `(B(u, v), v) = 0` holds exactly
/// for the antisymmetric central difference.
pub fn convective(u: &VectorField, v: &VectorField) -> Result<VectorField> {
    u.grid().check_same(v.grid())?;
    let grid = *u.grid();
    let n = grid.len();
    let dim = grid.dim();
    let mut out = VectorField::zeros(grid);
    let mut dv = vec![0.0; n];
    let mut prod = vec![0.0; n];
    let mut dprod = vec![0.0; n];
    for c in 0..dim {
        let vc = v.component(c);
        let oc = out.component_mut(c);
        for a in 0..dim {
            let ua = u.component(a);
            central_diff(&grid, a, vc, &mut dv);
            for i in 0..n {
                prod[i] = ua[i] * vc[i];
            }
            central_diff(&grid, a, &prod, &mut dprod);
            for i in 0..n {
                oc[i] += 0.5 * (ua[i] * dv[i] + dprod[i]);
            }
        }
    }
    Ok(out)
}

/// Discrete `H¹` norm of a vector field through the sine basis.
pub fn h1_norm(u: &VectorField) -> f64 {
    SineBasis::new(*u.grid()).spectral_norm_vector(u, 1.0)
}
