//! Time integration of the full, truncated and linear systems and of the
//! splittings used to analyse them.
//!
//! The pressure equation is always integrated as `dp/dt = -P₀ div(D u)`,
//! where `P₀` removes the mean: with zero extension the discrete divergence
//! does not integrate to zero by itself, and `P₀ div` is exactly the adjoint
//! of the gradient restricted to mean-zero pressures. This keeps the energy
//! identity exact in semi-discrete form.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::grid::{
    div, grad, laplacian, project_mean_zero, project_mean_zero_in_place, Grid, ScalarField,
    SineBasis, VectorField,
};
use crate::linalg::{preconditioned_cg, CgOptions, DirichletPoisson};
use crate::physics::{apply_fprime, convective, eval_f, Forcing, MediumMatrix, NonlinearityParams};

/// Phase-space point `(u, p)` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub u: VectorField,
    pub p: ScalarField,
    pub t: f64,
}

impl SimState {
    /// Projects `p` onto mean-zero pressures.
    pub fn new(u: VectorField, p: ScalarField, t: f64) -> Result<Self> {
        u.grid().check_same(p.grid())?;
        if !u.is_finite() || !p.is_finite() || !t.is_finite() {
            return Err(Error::invalid("state contains non-finite values"));
        }
        Ok(Self { u, p: project_mean_zero(&p), t })
    }

    pub fn zero(grid: Grid) -> Self {
        Self { u: VectorField::zeros(grid), p: ScalarField::zeros(grid), t: 0.0 }
    }

    pub fn grid(&self) -> &Grid {
        self.u.grid()
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.p.is_finite()
    }

    /// `‖u‖²_{H¹} + ‖p‖²`, the squared norm of `E = H¹₀ × L̄²`.
    pub fn e_norm_sq(&self, basis: &SineBasis) -> f64 {
        basis.spectral_norm_vector(&self.u, 1.0).powi(2) + self.p.dot(&self.p)
    }

    /// `‖u‖²_{H²} + ‖p‖²_{H¹}`, the squared norm of `E¹`.
    pub fn e1_norm_sq(&self, basis: &SineBasis) -> f64 {
        basis.spectral_norm_vector(&self.u, 2.0).powi(2) + basis.spectral_norm(self.p.values(), 1.0).powi(2)
    }

    pub fn difference(&self, other: &SimState) -> SimState {
        SimState { u: self.u.sub(&other.u), p: self.p.sub(&other.p), t: self.t }
    }

    fn pack(&self) -> Vec<f64> {
        let mut y = self.u.values().to_vec();
        y.extend_from_slice(self.p.values());
        y
    }

    fn unpack(grid: Grid, y: &[f64], t: f64) -> SimState {
        let nu = grid.dim() * grid.len();
        SimState {
            u: VectorField::from_values(grid, y[..nu].to_vec()).unwrap_or_else(|_| nan_vector(grid)),
            p: ScalarField::from_values(grid, y[nu..].to_vec()).unwrap_or_else(|_| nan_scalar(grid)),
            t,
        }
    }
}

fn nan_vector(grid: Grid) -> VectorField {
    let mut v = VectorField::zeros(grid);
    v.values_mut().iter_mut().for_each(|x| *x = f64::NAN);
    v
}

fn nan_scalar(grid: Grid) -> ScalarField {
    let mut v = ScalarField::zeros(grid);
    v.values_mut().iter_mut().for_each(|x| *x = f64::NAN);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Classical four-stage Runge-Kutta.
    Rk4,
    /// Implicit Euler for `Δ`, `∇p` and `div(Du)`; `f` and `B` explicit.
    SemiImplicit,
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rk4" => Ok(Scheme::Rk4),
            "semi_implicit" => Ok(Scheme::SemiImplicit),
            other => Err(Error::invalid(format!("unknown scheme {other:?} (expected rk4 or semi_implicit)"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub dt: f64,
    pub scheme: Scheme,
    pub newton_tol: f64,
    pub newton_max: usize,
    pub cg_tol: f64,
    pub cfl_safety: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { dt: 1e-4, scheme: Scheme::Rk4, newton_tol: 1e-10, newton_max: 30, cg_tol: 1e-12, cfl_safety: 0.9 }
    }
}

impl SolverConfig {
    /// `min(h²/(2d), h/√eigmax(D))`.
    pub fn cfl_limit(grid: &Grid, d: &MediumMatrix) -> f64 {
        let h = grid.h();
        (h * h / (2.0 * grid.dim() as f64)).min(h / d.eig_max().sqrt())
    }

    /// Largest step below the CFL bound that divides `span` evenly.
    pub fn stable_dt(grid: &Grid, d: &MediumMatrix, cfl_safety: f64, span: f64) -> f64 {
        let limit = cfl_safety * Self::cfl_limit(grid, d);
        let steps = (span / limit).ceil().max(1.0);
        span / steps
    }

    pub fn validate(&self, grid: &Grid, d: &MediumMatrix) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::invalid(format!("cfl_safety must lie in (0, 1], got {}", self.cfl_safety)));
        }
        if self.scheme == Scheme::Rk4 {
            let limit = self.cfl_safety * Self::cfl_limit(grid, d);
            if self.dt > limit * (1.0 + 1e-12) {
                return Err(Error::invalid(format!(
                    "dt = {} exceeds the rk4 stability bound {limit:.3e} on {grid}",
                    self.dt
                )));
            }
        }
        Ok(())
    }

    pub fn cg_options(&self) -> CgOptions {
        CgOptions { tol: self.cg_tol, max_iter: 20_000 }
    }
}

/// One classical RK4 step for `y' = F(t, y)` on a packed state vector.
pub(crate) fn rk4<F>(y: &[f64], t: f64, dt: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let k1 = f(t, y)?;
    let stage = |k: &[f64], a: f64| -> Vec<f64> { y.iter().zip(k).map(|(yi, ki)| yi + a * ki).collect() };
    let k2 = f(t + 0.5 * dt, &stage(&k1, 0.5 * dt))?;
    let k3 = f(t + 0.5 * dt, &stage(&k2, 0.5 * dt))?;
    let k4 = f(t + dt, &stage(&k3, dt))?;
    Ok((0..y.len())
        .map(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// `-P₀ div(D u)`.
pub fn pressure_rate(u: &VectorField, d: &MediumMatrix) -> ScalarField {
    let mut dp = div(&u.apply_medium(d));
    project_mean_zero_in_place(dp.values_mut());
    dp.scaled(-1.0)
}

/// The full system `u' = Δu - ∇p - f(u) [- B(u,u)] + g`, `p' = -P₀ div(Du)`.
#[derive(Debug, Clone)]
pub struct FullSystem {
    pub d: MediumMatrix,
    pub params: NonlinearityParams,
    pub forcing: Forcing,
    pub convective: bool,
    basis: OnceLock<SineBasis>,
}

impl FullSystem {
    pub fn new(d: MediumMatrix, params: NonlinearityParams, forcing: Forcing, convective: bool) -> Result<Self> {
        if d.dim() != forcing.grid().dim() {
            return Err(Error::invalid("medium matrix and forcing live in different dimensions"));
        }
        Ok(Self { d, params, forcing, convective, basis: OnceLock::new() })
    }

    pub fn grid(&self) -> &Grid {
        self.forcing.grid()
    }

    /// Linear part only (`f = 0`, `g = 0`, no convection).
    pub fn linear(d: MediumMatrix, grid: Grid) -> Self {
        Self {
            d,
            params: NonlinearityParams::linear(),
            forcing: Forcing::zero(grid),
            convective: false,
            basis: OnceLock::new(),
        }
    }

    pub fn rhs(&self, u: &VectorField, p: &ScalarField, t: f64) -> Result<(VectorField, ScalarField)> {
        let g = self.forcing.at(t);
        u.grid().check_same(g.grid())?;
        u.grid().check_same(p.grid())?;
        let mut du = laplacian(u);
        du.axpy(-1.0, &grad(p));
        if !self.params.is_zero() {
            du.axpy(-1.0, &eval_f(u, &self.params));
        }
        if self.convective {
            du.axpy(-1.0, &convective(u, u)?);
        }
        du.axpy(1.0, &g);
        Ok((du, pressure_rate(u, &self.d)))
    }

    pub fn step(&self, state: &SimState, cfg: &SolverConfig) -> Result<SimState> {
        let grid = *state.grid();
        let t_next = state.t + cfg.dt;
        let mut next = match cfg.scheme {
            Scheme::Rk4 => {
                let y = rk4(&state.pack(), state.t, cfg.dt, |t, y| {
                    let s = SimState::unpack(grid, y, t);
                    let (du, dp) = self.rhs(&s.u, &s.p, t)?;
                    let mut out = du.into_values();
                    out.extend(dp.into_values());
                    Ok(out)
                })?;
                SimState::unpack(grid, &y, t_next)
            }
            Scheme::SemiImplicit => self.semi_implicit_step(state, cfg)?,
        };
        if !next.is_finite() {
            return Err(Error::BlowUp { step: (t_next / cfg.dt).round() as u64, t: t_next });
        }
        project_mean_zero_in_place(next.p.values_mut());
        Ok(next)
    }

    /// Implicit Euler on the linear coupling: with `p⁺ = p + dt P₀ Gᵀ D u⁺`,
    /// `u⁺` solves `D[(I - dtΔ) + dt² G P₀ Gᵀ D] u⁺ = D r`, which is symmetric
    /// positive definite.
    fn semi_implicit_step(&self, state: &SimState, cfg: &SolverConfig) -> Result<SimState> {
        let grid = *state.grid();
        let dt = cfg.dt;
        let n = grid.len();
        let dim = grid.dim();
        let mut r = state.u.clone();
        let mut explicit = self.forcing.at(state.t + dt);
        if !self.params.is_zero() {
            explicit.axpy(-1.0, &eval_f(&state.u, &self.params));
        }
        if self.convective {
            explicit.axpy(-1.0, &convective(&state.u, &state.u)?);
        }
        r.axpy(dt, &explicit);
        r.axpy(-dt, &grad(&state.p));
        let b = r.apply_medium(&self.d);
        let basis = self.basis.get_or_init(|| SineBasis::new(grid));
        let d_inv = self.d.inverse_row_major();
        let mut x = state.u.values().to_vec();
        let d = &self.d;
        preconditioned_cg(
            |v, out| {
                let vf = VectorField::from_values(grid, v.to_vec()).unwrap_or_else(|_| nan_vector(grid));
                let mut m = vf.sub(&laplacian(&vf).scaled(dt));
                let dv = vf.apply_medium(d);
                let mut q = div(&dv);
                project_mean_zero_in_place(q.values_mut());
                // G P₀ Gᵀ D v = -G P₀ div(D v)
                m.axpy(-dt * dt, &grad(&q));
                out.copy_from_slice(m.apply_medium(d).values());
            },
            |rv, z| {
                // (D ⊗ (I - dtΔ))⁻¹ through the sine basis.
                let mut tmp = vec![0.0; dim * n];
                for c in 0..dim {
                    let mut coef = basis.forward(&rv[c * n..(c + 1) * n]);
                    for (ci, li) in coef.iter_mut().zip(basis.eigenvalues()) {
                        *ci /= 1.0 + dt * li;
                    }
                    tmp[c * n..(c + 1) * n].copy_from_slice(&basis.inverse(&coef));
                }
                for row in 0..dim {
                    for i in 0..n {
                        z[row * n + i] = (0..dim).map(|c| d_inv[row * dim + c] * tmp[c * n + i]).sum();
                    }
                }
            },
            b.values(),
            &mut x,
            cfg.cg_options(),
        )?;
        let u = VectorField::from_values(grid, x).map_err(|_| Error::BlowUp {
            step: ((state.t + dt) / dt).round() as u64,
            t: state.t + dt,
        })?;
        let mut p = state.p.clone();
        p.axpy(dt, &pressure_rate(&u, &self.d));
        Ok(SimState { u, p, t: state.t + dt })
    }
}

/// `(du/dt, dp/dt)` of the full system at `state`.
pub fn rhs_full(
    state: &SimState,
    g: &VectorField,
    d: &MediumMatrix,
    params: &NonlinearityParams,
    convective_on: bool,
) -> Result<(VectorField, ScalarField)> {
    let sys = FullSystem::new(d.clone(), *params, Forcing::constant(g.clone()), convective_on)?;
    sys.rhs(&state.u, &state.p, state.t)
}

pub fn step(
    state: &SimState,
    cfg: &SolverConfig,
    g: &VectorField,
    d: &MediumMatrix,
    params: &NonlinearityParams,
    convective_on: bool,
) -> Result<SimState> {
    let sys = FullSystem::new(d.clone(), *params, Forcing::constant(g.clone()), convective_on)?;
    cfg.validate(sys.grid(), d)?;
    sys.step(state, cfg)
}

/// Number of uniform steps covering `span`; errors unless `span` is a whole
/// multiple of `dt` to within rounding.
pub fn step_count(span: f64, dt: f64) -> Result<usize> {
    let k = (span / dt).round();
    if (k * dt - span).abs() > 1e-9 * span.max(dt) {
        return Err(Error::invalid(format!("span {span} is not a whole number of steps dt = {dt}")));
    }
    Ok(k as usize)
}

/// Integrates the full system over `[t₀, t₀ + span]`, calling `observer` on
/// the initial state and after every step. Returns the final state.
pub fn integrate<O>(system: &FullSystem, initial: &SimState, cfg: &SolverConfig, span: f64, mut observer: O) -> Result<SimState>
where
    O: FnMut(usize, &SimState) -> Result<()>,
{
    cfg.validate(system.grid(), &system.d)?;
    let steps = step_count(span, cfg.dt)?;
    let t0 = initial.t;
    let mut state = initial.clone();
    observer(0, &state)?;
    for k in 1..=steps {
        state = system.step(&state, cfg).map_err(|e| match e {
            Error::BlowUp { t, .. } => Error::BlowUp { step: k as u64, t },
            other => other,
        })?;
        state.t = t0 + k as f64 * cfg.dt;
        observer(k, &state)?;
    }
    Ok(state)
}

/// Uniform-step trajectory sampled every `stride` steps (endpoints included).
pub fn trajectory(system: &FullSystem, initial: &SimState, cfg: &SolverConfig, span: f64, stride: usize) -> Result<Vec<SimState>> {
    let stride = stride.max(1);
    let steps = step_count(span, cfg.dt)?;
    let mut out = Vec::new();
    integrate(system, initial, cfg, span, |k, s| {
        if k % stride == 0 || k == steps {
            out.push(s.clone());
        }
        Ok(())
    })?;
    Ok(out)
}

/// Newton solver for `-Δu + ∇p + f(u + o) - f(o) + a u = rhs`, `u = 0` on `∂Ω`,
/// with exact Jacobian `-Δ + f'(u + o) + a`, CG inner solves preconditioned
/// by the exact `(-Δ)⁻¹`, and a halving line search.
#[derive(Debug, Clone)]
pub struct EllipticSolver {
    poisson: DirichletPoisson,
    pub newton_tol: f64,
    pub newton_max: usize,
    pub cg: CgOptions,
}

#[derive(Debug, Clone)]
pub struct EllipticSolution {
    pub u: VectorField,
    pub iterations: usize,
    /// Residual norm before each Newton step and after the last one.
    pub history: Vec<f64>,
}

impl EllipticSolver {
    pub fn new(grid: Grid, cfg: &SolverConfig) -> Self {
        Self {
            poisson: DirichletPoisson::new(grid),
            newton_tol: cfg.newton_tol,
            newton_max: cfg.newton_max,
            cg: cfg.cg_options(),
        }
    }

    pub fn grid(&self) -> &Grid {
        self.poisson.grid()
    }

    /// `(-Δ)⁻¹ rhs` by preconditioned CG.
    pub fn solve_poisson(&self, rhs: &VectorField) -> Result<VectorField> {
        self.poisson.solve(rhs, self.cg)
    }

    fn residual(
        &self,
        u: &VectorField,
        grad_p: &VectorField,
        rhs: &VectorField,
        params: &NonlinearityParams,
        offset: Option<&VectorField>,
        extra: Option<&ScalarField>,
    ) -> VectorField {
        let mut r = laplacian(u).scaled(-1.0);
        r.axpy(1.0, grad_p);
        r.axpy(-1.0, rhs);
        if !params.is_zero() {
            match offset {
                Some(o) => {
                    r.axpy(1.0, &eval_f(&u.add(o), params));
                    r.axpy(-1.0, &eval_f(o, params));
                }
                None => r.axpy(1.0, &eval_f(u, params)),
            }
        }
        if let Some(a) = extra {
            add_weighted(&mut r, a, u);
        }
        r
    }

    #[allow(clippy::too_many_arguments)]
    pub fn solve(
        &self,
        p: &ScalarField,
        rhs: &VectorField,
        params: &NonlinearityParams,
        offset: Option<&VectorField>,
        extra: Option<&ScalarField>,
        guess: Option<&VectorField>,
    ) -> Result<EllipticSolution> {
        let grid = *self.grid();
        grid.check_same(p.grid())?;
        grid.check_same(rhs.grid())?;
        if let Some(a) = extra {
            grid.check_same(a.grid())?;
            if a.values().iter().any(|v| *v < 0.0) {
                return Err(Error::invalid("extra linear weight must be nonnegative"));
            }
        }
        let grad_p = grad(p);
        if params.is_zero() && extra.is_none() {
            let mut b = rhs.clone();
            b.axpy(-1.0, &grad_p);
            let u = self.solve_poisson(&b)?;
            let res = self.residual(&u, &grad_p, rhs, params, offset, extra).norm_l2();
            return Ok(EllipticSolution { u, iterations: 1, history: vec![res] });
        }
        let mut u = guess.cloned().unwrap_or_else(|| VectorField::zeros(grid));
        let mut r = self.residual(&u, &grad_p, rhs, params, offset, extra);
        let mut res = r.norm_l2();
        let mut history = vec![res];
        let mut iterations = 0;
        while res > self.newton_tol {
            if iterations >= self.newton_max {
                return Err(Error::NewtonNotConverged { iterations, history });
            }
            iterations += 1;
            let at = match offset {
                Some(o) => u.add(o),
                None => u.clone(),
            };
            let mut delta = vec![0.0; r.values().len()];
            let neg_r: Vec<f64> = r.values().iter().map(|v| -v).collect();
            // Inexact Newton: the linear solve only needs to beat the current residual.
            let cg = CgOptions { tol: self.cg.tol.max(1e-3 * self.newton_tol / res).min(1e-2), ..self.cg };
            preconditioned_cg(
                |v, out| {
                    let vf = VectorField::from_values(grid, v.to_vec()).unwrap_or_else(|_| nan_vector(grid));
                    let mut j = laplacian(&vf).scaled(-1.0);
                    if !params.is_zero() {
                        j.axpy(1.0, &apply_fprime(&at, &vf, params).expect("same grid"));
                    }
                    if let Some(a) = extra {
                        add_weighted(&mut j, a, &vf);
                    }
                    out.copy_from_slice(j.values());
                },
                |rv, z| self.poisson.apply_inverse(rv, z),
                &neg_r,
                &mut delta,
                cg,
            )?;
            let delta = VectorField::from_values(grid, delta)?;
            let mut s = 1.0;
            loop {
                let mut trial = u.clone();
                trial.axpy(s, &delta);
                let rt = self.residual(&trial, &grad_p, rhs, params, offset, extra);
                let rn = rt.norm_l2();
                if rn < res || s < 1e-10 {
                    u = trial;
                    r = rt;
                    res = rn;
                    break;
                }
                s *= 0.5;
            }
            history.push(res);
        }
        Ok(EllipticSolution { u, iterations, history })
    }
}

fn add_weighted(out: &mut VectorField, a: &ScalarField, u: &VectorField) {
    let n = a.values().len();
    let dim = u.grid().dim();
    for c in 0..dim {
        let uc = &u.values()[c * n..(c + 1) * n];
        let oc = &mut out.values_mut()[c * n..(c + 1) * n];
        for i in 0..n {
            oc[i] += a.values()[i] * uc[i];
        }
    }
}

/// Solves `-Δu + ∇p + f(u) + a(x) u = g_t` for `u` with zero boundary values.
pub fn solve_elliptic_u(
    p: &ScalarField,
    g_t: &VectorField,
    params: &NonlinearityParams,
    extra_linear: Option<&ScalarField>,
    cfg: &SolverConfig,
) -> Result<VectorField> {
    Ok(EllipticSolver::new(*p.grid(), cfg).solve(p, g_t, params, None, extra_linear, None)?.u)
}

/// The truncated system `-Δu + ∇p + f(u) = g(t)`, `p' = -P₀ div(D u)`.
#[derive(Debug, Clone)]
pub struct TruncatedSystem {
    pub d: MediumMatrix,
    pub params: NonlinearityParams,
    pub forcing: Forcing,
    solver: EllipticSolver,
}

impl TruncatedSystem {
    pub fn new(d: MediumMatrix, params: NonlinearityParams, forcing: Forcing, cfg: &SolverConfig) -> Self {
        let solver = EllipticSolver::new(*forcing.grid(), cfg);
        Self { d, params, forcing, solver }
    }

    pub fn grid(&self) -> &Grid {
        self.forcing.grid()
    }

    pub fn solver(&self) -> &EllipticSolver {
        &self.solver
    }

    /// Velocity slaved to `p` at time `t`; `guess` only seeds Newton.
    pub fn velocity(&self, p: &ScalarField, t: f64, guess: Option<&VectorField>) -> Result<VectorField> {
        Ok(self.solver.solve(p, &self.forcing.at(t), &self.params, None, None, guess)?.u)
    }

    /// One RK4 step on `p`, re-solving `u` at every stage.
    pub fn step(&self, p: &ScalarField, t: f64, dt: f64, warm: &mut Option<VectorField>) -> Result<ScalarField> {
        let grid = *self.grid();
        let y = rk4(p.values(), t, dt, |ts, y| {
            let pf = ScalarField::from_values(grid, y.to_vec())?;
            let u = self.velocity(&pf, ts, warm.as_ref())?;
            let dp = pressure_rate(&u, &self.d);
            *warm = Some(u);
            Ok(dp.into_values())
        })?;
        let mut out = ScalarField::from_values(grid, y)
            .map_err(|_| Error::BlowUp { step: ((t + dt) / dt).round() as u64, t: t + dt })?;
        project_mean_zero_in_place(out.values_mut());
        Ok(out)
    }

    /// `(t, p, u)` snapshots every `stride` steps over `[t₀, t₀ + span]`.
    pub fn run(&self, p0: &ScalarField, t0: f64, dt: f64, span: f64, stride: usize) -> Result<Vec<(f64, ScalarField, VectorField)>> {
        let steps = step_count(span, dt)?;
        let stride = stride.max(1);
        let mut p = project_mean_zero(p0);
        let mut warm = None;
        let mut out = vec![(t0, p.clone(), self.velocity(&p, t0, None)?)];
        for k in 1..=steps {
            let t = t0 + (k - 1) as f64 * dt;
            p = self.step(&p, t, dt, &mut warm)?;
            if k % stride == 0 || k == steps {
                let tk = t0 + k as f64 * dt;
                out.push((tk, p.clone(), self.velocity(&p, tk, warm.as_ref())?));
            }
        }
        Ok(out)
    }
}

/// One RK4 step of the truncated system from `(p, t)`.
pub fn step_truncated(
    p: &ScalarField,
    t: f64,
    forcing: &Forcing,
    cfg: &SolverConfig,
    d: &MediumMatrix,
    params: &NonlinearityParams,
) -> Result<ScalarField> {
    let sys = TruncatedSystem::new(d.clone(), *params, forcing.clone(), cfg);
    sys.step(p, t, cfg.dt, &mut None)
}

/// Snapshots of a two-part splitting `p = q + r`, `u = v + w` together with
/// the reference solution it decomposes.
#[derive(Debug, Clone, Default)]
pub struct SplitTrajectory {
    pub times: Vec<f64>,
    /// `(q, v)`: the contracting (or linear decaying) part.
    pub qv: Vec<(ScalarField, VectorField)>,
    /// `(r, w)`: the remainder.
    pub rw: Vec<(ScalarField, VectorField)>,
    /// `(p, u)`: the reference solution.
    pub reference: Vec<(ScalarField, VectorField)>,
}

impl SplitTrajectory {
    /// Largest relative recombination defect over snapshots, for `p` and `u`.
    pub fn recombination_error(&self) -> (f64, f64) {
        let mut ep: f64 = 0.0;
        let mut eu: f64 = 0.0;
        for ((q, v), ((r, w), (p, u))) in self.qv.iter().zip(self.rw.iter().zip(&self.reference)) {
            let pn = p.norm_l2();
            if pn > 0.0 {
                ep = ep.max(q.add(r).sub(p).norm_l2() / pn);
            }
            let un = u.norm_l2();
            if un > 0.0 {
                eu = eu.max(v.add(w).sub(u).norm_l2() / un);
            }
        }
        (ep, eu)
    }
}

/// Problem data for the truncated-system splittings.
#[derive(Debug, Clone)]
pub struct TruncatedProblem {
    pub p0: ScalarField,
    pub forcing: Forcing,
    pub d: MediumMatrix,
    pub params: NonlinearityParams,
}

fn split_blocks(grid: Grid, y: &[f64], k: usize) -> Vec<ScalarField> {
    let n = grid.len();
    (0..k)
        .map(|i| ScalarField::from_values(grid, y[i * n..(i + 1) * n].to_vec()).unwrap_or_else(|_| nan_scalar(grid)))
        .collect()
}

/// Co-integrates the reference truncated solution `p` with the splitting
///
/// ```text
/// q' = -P₀ div(D v),  -Δv + ∇q + f(v) + L v = 0,             q(0) = p(0)
/// r' = -P₀ div(D w),  -Δw + ∇r + f(u) - f(v) = L v + g(t),   r(0) = 0
/// ```
///
/// `q + r = p` is checked afterwards, never imposed.
pub fn run_split(problem: &TruncatedProblem, cfg: &SolverConfig, shift: f64, span: f64, stride: usize) -> Result<SplitTrajectory> {
    if !(shift >= 0.0) {
        return Err(Error::invalid(format!("monotone shift must be >= 0, got {shift}")));
    }
    let grid = *problem.p0.grid();
    let solver = EllipticSolver::new(grid, cfg);
    let shift_field = ScalarField::constant(grid, shift);
    let extra = (shift > 0.0).then_some(&shift_field);
    let zero = VectorField::zeros(grid);
    let p0 = project_mean_zero(&problem.p0);
    let n = grid.len();
    let mut y = p0.values().to_vec();
    y.extend_from_slice(p0.values());
    y.extend(std::iter::repeat(0.0).take(n));

    let mut warm_u: Option<VectorField> = None;
    let mut warm_v: Option<VectorField> = None;
    let mut velocities = |t: f64, blocks: &[ScalarField]| -> Result<[VectorField; 3]> {
        let g = problem.forcing.at(t);
        let u = solver.solve(&blocks[0], &g, &problem.params, None, None, warm_u.as_ref())?.u;
        let v = solver.solve(&blocks[1], &zero, &problem.params, None, extra, warm_v.as_ref())?.u;
        let mut rhs_w = g;
        rhs_w.axpy(shift, &v);
        rhs_w.axpy(-1.0, &eval_f(&u, &problem.params));
        rhs_w.axpy(1.0, &eval_f(&v, &problem.params));
        rhs_w.axpy(-1.0, &grad(&blocks[2]));
        let w = solver.solve_poisson(&rhs_w)?;
        warm_u = Some(u.clone());
        warm_v = Some(v.clone());
        Ok([u, v, w])
    };

    let steps = step_count(span, cfg.dt)?;
    let stride = stride.max(1);
    let mut out = SplitTrajectory::default();
    let record = |t: f64, blocks: &[ScalarField], vel: &[VectorField; 3], out: &mut SplitTrajectory| {
        out.times.push(t);
        out.reference.push((blocks[0].clone(), vel[0].clone()));
        out.qv.push((blocks[1].clone(), vel[1].clone()));
        out.rw.push((blocks[2].clone(), vel[2].clone()));
    };
    let blocks = split_blocks(grid, &y, 3);
    let vel = velocities(0.0, &blocks)?;
    record(0.0, &blocks, &vel, &mut out);
    for k in 1..=steps {
        let t = (k - 1) as f64 * cfg.dt;
        y = rk4(&y, t, cfg.dt, |ts, ys| {
            let blocks = split_blocks(grid, ys, 3);
            let vel = velocities(ts, &blocks)?;
            let mut dy = Vec::with_capacity(3 * n);
            for v in &vel {
                dy.extend(pressure_rate(v, &problem.d).into_values());
            }
            Ok(dy)
        })?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step: k as u64, t: k as f64 * cfg.dt });
        }
        for b in y.chunks_mut(n) {
            project_mean_zero_in_place(b);
        }
        if k % stride == 0 || k == steps {
            let tk = k as f64 * cfg.dt;
            let blocks = split_blocks(grid, &y, 3);
            let vel = velocities(tk, &blocks)?;
            record(tk, &blocks, &vel, &mut out);
        }
    }
    Ok(out)
}

/// Linear/forced splitting of the truncated solution:
///
/// ```text
/// p₁' = -P₀ div(D u₁),  -Δu₁ + ∇p₁ = 0,                p₁(0) = p(0)
/// p₂' = -P₀ div(D u₂),  -Δu₂ + ∇p₂ = g(t) - f(u(t)),   p₂(0) = 0
/// ```
///
/// Stored as `qv = (p₁, u₁)`, `rw = (p₂, u₂)`.
pub fn run_bootstrap_split(problem: &TruncatedProblem, cfg: &SolverConfig, span: f64, stride: usize) -> Result<SplitTrajectory> {
    let grid = *problem.p0.grid();
    let solver = EllipticSolver::new(grid, cfg);
    let p0 = project_mean_zero(&problem.p0);
    let n = grid.len();
    let mut y = p0.values().to_vec();
    y.extend_from_slice(p0.values());
    y.extend(std::iter::repeat(0.0).take(n));

    let mut warm_u: Option<VectorField> = None;
    let mut velocities = |t: f64, blocks: &[ScalarField]| -> Result<[VectorField; 3]> {
        let g = problem.forcing.at(t);
        let u = solver.solve(&blocks[0], &g, &problem.params, None, None, warm_u.as_ref())?.u;
        let u1 = solver.solve_poisson(&grad(&blocks[1]).scaled(-1.0))?;
        let mut rhs2 = g;
        rhs2.axpy(-1.0, &eval_f(&u, &problem.params));
        rhs2.axpy(-1.0, &grad(&blocks[2]));
        let u2 = solver.solve_poisson(&rhs2)?;
        warm_u = Some(u.clone());
        Ok([u, u1, u2])
    };

    let steps = step_count(span, cfg.dt)?;
    let stride = stride.max(1);
    let mut out = SplitTrajectory::default();
    let record = |t: f64, blocks: &[ScalarField], vel: &[VectorField; 3], out: &mut SplitTrajectory| {
        out.times.push(t);
        out.reference.push((blocks[0].clone(), vel[0].clone()));
        out.qv.push((blocks[1].clone(), vel[1].clone()));
        out.rw.push((blocks[2].clone(), vel[2].clone()));
    };
    let blocks = split_blocks(grid, &y, 3);
    let vel = velocities(0.0, &blocks)?;
    record(0.0, &blocks, &vel, &mut out);
    for k in 1..=steps {
        let t = (k - 1) as f64 * cfg.dt;
        y = rk4(&y, t, cfg.dt, |ts, ys| {
            let blocks = split_blocks(grid, ys, 3);
            let vel = velocities(ts, &blocks)?;
            let mut dy = Vec::with_capacity(3 * n);
            for v in &vel {
                dy.extend(pressure_rate(v, &problem.d).into_values());
            }
            Ok(dy)
        })?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step: k as u64, t: k as f64 * cfg.dt });
        }
        for b in y.chunks_mut(n) {
            project_mean_zero_in_place(b);
        }
        if k % stride == 0 || k == steps {
            let tk = k as f64 * cfg.dt;
            let blocks = split_blocks(grid, &y, 3);
            let vel = velocities(tk, &blocks)?;
            record(tk, &blocks, &vel, &mut out);
        }
    }
    Ok(out)
}

/// Snapshots of the exponential-attractor splitting of the difference of
/// two full solutions.
#[derive(Debug, Clone, Default)]
pub struct ExpSplitTrajectory {
    pub times: Vec<f64>,
    /// `(û, p̂)`: homogeneous linear part.
    pub hat: Vec<(VectorField, ScalarField)>,
    /// `(ũ, p̃)`: part forced by `-l(t) ū`.
    pub tilde: Vec<(VectorField, ScalarField)>,
    /// `(ū, p̄) = (u₁ - u₂, p₁ - p₂)`.
    pub difference: Vec<(VectorField, ScalarField)>,
}

impl ExpSplitTrajectory {
    /// Largest relative defect of `hat + tilde` against the difference.
    pub fn recombination_error(&self) -> f64 {
        let mut e: f64 = 0.0;
        for ((hu, hp), ((tu, tp), (du, dp))) in self.hat.iter().zip(self.tilde.iter().zip(&self.difference)) {
            let norm = (du.norm_l2().powi(2) + dp.norm_l2().powi(2)).sqrt();
            if norm > 0.0 {
                let defect = (hu.add(tu).sub(du).norm_l2().powi(2) + hp.add(tp).sub(dp).norm_l2().powi(2)).sqrt();
                e = e.max(defect / norm);
            }
        }
        e
    }
}

/// Gauss-Legendre nodes and weights on `[0, 1]`.
const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_3, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

/// `l(t) ū = ∫₀¹ f'(τ u₁ + (1 - τ) u₂) ū dτ` by three-point Gauss quadrature.
/// Exact whenever the integrand is a polynomial of degree ≤ 5 in `τ`, which
/// covers `l ∈ {1, 2}` with `gamma = 0`.
pub fn averaged_jacobian_action(u1: &VectorField, u2: &VectorField, params: &NonlinearityParams) -> Result<VectorField> {
    averaged_jacobian_action_with(u1, u2, params, &GAUSS3)
}

pub(crate) fn averaged_jacobian_action_with(
    u1: &VectorField,
    u2: &VectorField,
    params: &NonlinearityParams,
    rule: &[(f64, f64)],
) -> Result<VectorField> {
    u1.grid().check_same(u2.grid())?;
    let diff = u1.sub(u2);
    let mut out = VectorField::zeros(*u1.grid());
    if params.is_zero() {
        return Ok(out);
    }
    for &(tau, w) in rule {
        let mut at = u1.scaled(tau);
        at.axpy(1.0 - tau, u2);
        out.axpy(w, &apply_fprime(&at, &diff, params)?);
    }
    Ok(out)
}

/// Evolves two full solutions together with
///
/// ```text
/// û' = Δû - ∇p̂,          p̂' = -P₀ div(D û),   (û, p̂)(0) = (ū, p̄)(0)
/// ũ' = Δũ - ∇p̃ - l(t)ū,  p̃' = -P₀ div(D ũ),   (ũ, p̃)(0) = 0
/// ```
pub fn run_exp_split(
    system: &FullSystem,
    init1: &SimState,
    init2: &SimState,
    cfg: &SolverConfig,
    span: f64,
    stride: usize,
) -> Result<ExpSplitTrajectory> {
    if system.convective {
        return Err(Error::invalid("the exponential splitting is defined for the system without convection"));
    }
    init1.grid().check_same(init2.grid())?;
    cfg.validate(system.grid(), &system.d)?;
    let grid = *init1.grid();
    let nu = grid.dim() * grid.len();
    let np = grid.len();
    let block = nu + np;
    let diff0 = init1.difference(init2);
    let mut y = init1.pack();
    y.extend(init2.pack());
    y.extend(diff0.pack());
    y.extend(std::iter::repeat(0.0).take(block));
    let linear = FullSystem::linear(system.d.clone(), grid);

    let unpack_all = |ys: &[f64], t: f64| -> [SimState; 4] {
        [0, 1, 2, 3].map(|i| SimState::unpack(grid, &ys[i * block..(i + 1) * block], t))
    };
    let steps = step_count(span, cfg.dt)?;
    let stride = stride.max(1);
    let mut out = ExpSplitTrajectory::default();
    let record = |t: f64, s: &[SimState; 4], out: &mut ExpSplitTrajectory| {
        out.times.push(t);
        out.hat.push((s[2].u.clone(), s[2].p.clone()));
        out.tilde.push((s[3].u.clone(), s[3].p.clone()));
        out.difference.push((s[0].u.sub(&s[1].u), s[0].p.sub(&s[1].p)));
    };
    let t0 = init1.t;
    record(t0, &unpack_all(&y, t0), &mut out);
    for k in 1..=steps {
        let t = t0 + (k - 1) as f64 * cfg.dt;
        y = rk4(&y, t, cfg.dt, |ts, ys| {
            let s = unpack_all(ys, ts);
            let mut dy = Vec::with_capacity(4 * block);
            for st in &s[..2] {
                let (du, dp) = system.rhs(&st.u, &st.p, ts)?;
                dy.extend(du.into_values());
                dy.extend(dp.into_values());
            }
            let (du, dp) = linear.rhs(&s[2].u, &s[2].p, ts)?;
            dy.extend(du.into_values());
            dy.extend(dp.into_values());
            let (mut du, dp) = linear.rhs(&s[3].u, &s[3].p, ts)?;
            du.axpy(-1.0, &averaged_jacobian_action(&s[0].u, &s[1].u, &system.params)?);
            dy.extend(du.into_values());
            dy.extend(dp.into_values());
            Ok(dy)
        })?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step: k as u64, t: t0 + k as f64 * cfg.dt });
        }
        for i in 0..4 {
            project_mean_zero_in_place(&mut y[i * block + nu..(i + 1) * block]);
        }
        if k % stride == 0 || k == steps {
            let tk = t0 + k as f64 * cfg.dt;
            record(tk, &unpack_all(&y, tk), &mut out);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn g2(n: usize) -> Grid {
        Grid::new(2, n).unwrap()
    }

    fn diag12() -> MediumMatrix {
        MediumMatrix::diagonal(&[1.0, 2.0]).unwrap()
    }

    #[test]
    fn zero_state_is_stationary() {
        let g = g2(8);
        let d = diag12();
        let p = NonlinearityParams::quintic();
        let s = SimState::zero(g);
        let (du, dp) = rhs_full(&s, &VectorField::zeros(g), &d, &p, true).unwrap();
        assert!(du.values().iter().all(|&v| v == 0.0));
        assert!(dp.values().iter().all(|&v| v == 0.0));
        let cfg = SolverConfig { dt: 1e-3, ..Default::default() };
        let next = step(&s, &cfg, &VectorField::zeros(g), &d, &p, false).unwrap();
        assert!(next.u.values().iter().all(|&v| v == 0.0));
        assert!((next.t - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn rhs_unrolls_for_pure_pressure() {
        use std::f64::consts::PI;
        let g = g2(8);
        let d = diag12();
        let p = project_mean_zero(&ScalarField::from_fn(g, |x| (PI * x[0]).sin() * (PI * x[1]).sin()));
        let forcing = SeededRng::new(2).vector_field(g, 0.3);
        let s = SimState::new(VectorField::zeros(g), p.clone(), 0.0).unwrap();
        let (du, _) = rhs_full(&s, &forcing, &d, &NonlinearityParams::quintic(), false).unwrap();
        let mut expect = grad(&p).scaled(-1.0);
        expect.axpy(1.0, &forcing);
        assert!(du.sub(&expect).norm_l2() <= 1e-14 * expect.norm_l2());
    }

    #[test]
    fn pressure_rate_has_zero_mean() {
        let g = g2(16);
        let d = MediumMatrix::new(2, &[2.0, 0.5, 0.5, 1.0]).unwrap();
        let mut rng = SeededRng::new(6);
        for _ in 0..20 {
            let u = rng.vector_field(g, 1.0);
            let pf = project_mean_zero(&rng.scalar_field(g, 1.0));
            let s = SimState::new(u, pf, 0.0).unwrap();
            let (_, dp) = rhs_full(&s, &VectorField::zeros(g), &d, &NonlinearityParams::quintic(), false).unwrap();
            assert!(dp.mean().abs() <= 1e-13);
        }
    }

    #[test]
    fn cfl_guard() {
        let g = g2(16);
        let d = diag12();
        let limit = SolverConfig::cfl_limit(&g, &d);
        assert!((limit - g.h() * g.h() / 4.0).abs() < 1e-18);
        let bad = SolverConfig { dt: limit * 2.0, ..Default::default() };
        assert!(bad.validate(&g, &d).is_err());
        let semi = SolverConfig { scheme: Scheme::SemiImplicit, ..bad };
        assert!(semi.validate(&g, &d).is_ok());
        let dt = SolverConfig::stable_dt(&g, &d, 0.9, 1.0);
        assert!(dt <= 0.9 * limit && step_count(1.0, dt).is_ok());
    }

    #[test]
    fn blow_up_is_reported_with_step() {
        let g = g2(8);
        let d = diag12();
        let sys = FullSystem::linear(d.clone(), g);
        let cfg = SolverConfig { dt: 0.05, scheme: Scheme::Rk4, cfl_safety: 1.0, ..Default::default() };
        let mut rng = SeededRng::new(1);
        let s = SimState::new(rng.vector_field(g, 1.0), ScalarField::zeros(g), 0.0).unwrap();
        // Bypass the CFL guard to force an unstable run.
        let mut state = s;
        let mut err = None;
        for k in 0..200 {
            match sys.step(&state, &cfg) {
                Ok(n) => state = n,
                Err(e) => {
                    err = Some((k, e));
                    break;
                }
            }
        }
        let (_, e) = err.expect("unstable run must blow up");
        assert!(matches!(e, Error::BlowUp { .. }));
    }

    #[test]
    fn semi_implicit_dissipates_linear_energy() {
        let g = g2(8);
        let d = MediumMatrix::new(2, &[2.0, 0.5, 0.5, 1.0]).unwrap();
        let sys = FullSystem::linear(d.clone(), g);
        let cfg = SolverConfig { dt: 0.05, scheme: Scheme::SemiImplicit, ..Default::default() };
        let mut rng = SeededRng::new(12);
        let mut s = SimState::new(rng.vector_field(g, 1.0), rng.scalar_field(g, 1.0), 0.0).unwrap();
        let energy = |s: &SimState| s.u.apply_medium(&d).dot(&s.u) + s.p.dot(&s.p);
        let mut e = energy(&s);
        for _ in 0..20 {
            s = sys.step(&s, &cfg).unwrap();
            let en = energy(&s);
            assert!(en <= e * (1.0 + 1e-12));
            assert!(s.p.mean().abs() < 1e-13);
            e = en;
        }
    }

    #[test]
    fn elliptic_trivial_and_linear_cases() {
        let g = g2(16);
        let cfg = SolverConfig::default();
        let zero_u = solve_elliptic_u(&ScalarField::zeros(g), &VectorField::zeros(g), &NonlinearityParams::quintic(), None, &cfg).unwrap();
        assert!(zero_u.values().iter().all(|&v| v == 0.0));

        let mut rng = SeededRng::new(31);
        let p = project_mean_zero(&rng.scalar_field(g, 1.0));
        let gt = rng.vector_field(g, 1.0);
        let u = solve_elliptic_u(&p, &gt, &NonlinearityParams::linear(), None, &cfg).unwrap();
        // Independent plain-CG oracle for -Δu = -∇p + g.
        let mut rhs = gt.clone();
        rhs.axpy(-1.0, &grad(&p));
        let mut x = vec![0.0; rhs.values().len()];
        crate::linalg::conjugate_gradient(
            |v, out| {
                let vf = VectorField::from_values(g, v.to_vec()).unwrap();
                out.copy_from_slice(laplacian(&vf).scaled(-1.0).values());
            },
            rhs.values(),
            &mut x,
            CgOptions { tol: 1e-14, max_iter: 10_000 },
        )
        .unwrap();
        let oracle = VectorField::from_values(g, x).unwrap();
        assert!(u.sub(&oracle).norm_l2() <= 1e-10 * oracle.norm_l2().max(1.0));
    }

    #[test]
    fn newton_converges_quadratically_for_quintic() {
        let g = g2(16);
        let cfg = SolverConfig { newton_tol: 1e-10, newton_max: 20, ..Default::default() };
        let solver = EllipticSolver::new(g, &cfg);
        let mut rng = SeededRng::new(41);
        for amp in [1.0, 5.0, 10.0] {
            let gt = rng.smooth_vector_field(g, 3).scaled(amp);
            let p = project_mean_zero(&rng.smooth_scalar_field(g, 3));
            let sol = solver.solve(&p, &gt, &NonlinearityParams::quintic(), None, None, None).unwrap();
            assert!(*sol.history.last().unwrap() <= 1e-10);
            assert!(sol.iterations <= 20);
            // Quadratic tail: r_{k+1} <= C r_k² once r_k is small.
            let h = &sol.history;
            let tail: Vec<f64> = h.windows(2).filter(|w| w[0] < 1e-2 && w[1] > 1e-11).map(|w| w[1] / (w[0] * w[0])).collect();
            for c in &tail {
                assert!(*c < 1e3, "history {h:?}");
            }
        }
    }

    #[test]
    fn newton_failure_reports_history() {
        let g = g2(8);
        let cfg = SolverConfig { newton_tol: 1e-30, newton_max: 2, ..Default::default() };
        let mut rng = SeededRng::new(1);
        let gt = rng.vector_field(g, 5.0);
        let err = solve_elliptic_u(&ScalarField::zeros(g), &gt, &NonlinearityParams::quintic(), None, &cfg).unwrap_err();
        match err {
            Error::NewtonNotConverged { iterations, history } => {
                assert_eq!(iterations, 2);
                assert_eq!(history.len(), 3);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn weighted_elliptic_problem() {
        let g = g2(8);
        let cfg = SolverConfig::default();
        let mut rng = SeededRng::new(3);
        let a = ScalarField::from_values(g, (0..g.len()).map(|i| (i % 5) as f64).collect()).unwrap();
        let gt = rng.vector_field(g, 1.0);
        let p = project_mean_zero(&rng.scalar_field(g, 1.0));
        let params = NonlinearityParams::quintic();
        let u = solve_elliptic_u(&p, &gt, &params, Some(&a), &cfg).unwrap();
        let mut r = laplacian(&u).scaled(-1.0);
        r.axpy(1.0, &grad(&p));
        r.axpy(1.0, &eval_f(&u, &params));
        add_weighted(&mut r, &a, &u);
        r.axpy(-1.0, &gt);
        assert!(r.norm_l2() <= 1e-10);
        let neg = a.scaled(-1.0);
        assert!(solve_elliptic_u(&p, &gt, &params, Some(&neg), &cfg).is_err());
    }

    #[test]
    fn truncated_zero_and_linear_decay() {
        let g = g2(8);
        let d = diag12();
        let cfg = SolverConfig { dt: 0.05, ..Default::default() };
        let zero = step_truncated(&ScalarField::zeros(g), 0.0, &Forcing::zero(g), &cfg, &d, &NonlinearityParams::quintic()).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));

        let sys = TruncatedSystem::new(d, NonlinearityParams::linear(), Forcing::zero(g), &cfg);
        let p0 = project_mean_zero(&SeededRng::new(5).scalar_field(g, 1.0));
        let run = sys.run(&p0, 0.0, 0.05, 2.0, 1).unwrap();
        for w in run.windows(2) {
            assert!(w[1].1.norm_l2() < w[0].1.norm_l2());
            assert!(w[1].1.mean().abs() < 1e-13);
        }
    }

    #[test]
    fn zero_reference_splits_are_zero() {
        let g = g2(8);
        let cfg = SolverConfig { dt: 0.1, ..Default::default() };
        let problem = TruncatedProblem {
            p0: ScalarField::zeros(g),
            forcing: Forcing::zero(g),
            d: diag12(),
            params: NonlinearityParams::quintic(),
        };
        let s = run_split(&problem, &cfg, 0.0, 0.5, 1).unwrap();
        let b = run_bootstrap_split(&problem, &cfg, 0.5, 1).unwrap();
        for tr in [&s, &b] {
            for ((q, v), (r, w)) in tr.qv.iter().zip(&tr.rw) {
                assert!(q.norm_l2() == 0.0 && v.norm_l2() == 0.0 && r.norm_l2() == 0.0 && w.norm_l2() == 0.0);
            }
        }
        let sys = FullSystem::new(diag12(), NonlinearityParams::quintic(), Forcing::zero(g), false).unwrap();
        let init = SimState::new(SeededRng::new(1).vector_field(g, 0.3), ScalarField::zeros(g), 0.0).unwrap();
        let dt = SolverConfig::stable_dt(&g, &sys.d, 0.9, 0.1);
        let e = run_exp_split(&sys, &init, &init, &SolverConfig { dt, ..cfg }, 0.1, 10).unwrap();
        for ((hu, hp), (tu, tp)) in e.hat.iter().zip(&e.tilde) {
            assert!(hu.norm_l2() == 0.0 && hp.norm_l2() == 0.0 && tu.norm_l2() == 0.0 && tp.norm_l2() == 0.0);
        }
    }

    #[test]
    fn gauss_rule_against_33_point_quadrature() {
        let g = g2(8);
        let mut rng = SeededRng::new(17);
        let u1 = rng.vector_field(g, 1.0);
        let u2 = rng.vector_field(g, 1.0);
        let simpson = |panels: usize| -> Vec<(f64, f64)> {
            (0..=panels)
                .map(|i| {
                    let w = if i == 0 || i == panels { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                    (i as f64 / panels as f64, w / (3.0 * panels as f64))
                })
                .collect()
        };
        // Degree-4 integrand: Gauss-3 is exact, Simpson nearly so.
        let q = NonlinearityParams::quintic();
        let a = averaged_jacobian_action(&u1, &u2, &q).unwrap();
        let b = averaged_jacobian_action_with(&u1, &u2, &q, &simpson(32)).unwrap();
        let exact = eval_f(&u1, &q).sub(&eval_f(&u2, &q));
        assert!(a.sub(&exact).norm_l2() <= 1e-12 * exact.norm_l2());
        let rel_b = b.sub(&exact).norm_l2() / exact.norm_l2();
        assert!(rel_b <= 1e-5, "{rel_b}");
        // Fractional powers: Gauss-3 stays within a few tenths of a percent.
        let frac = NonlinearityParams::new(1.0, 0.7, 0.3, 1.3).unwrap();
        let a = averaged_jacobian_action(&u1, &u2, &frac).unwrap();
        let exact = eval_f(&u1, &frac).sub(&eval_f(&u2, &frac));
        let b = averaged_jacobian_action_with(&u1, &u2, &frac, &simpson(32)).unwrap();
        assert!(b.sub(&exact).norm_l2() / exact.norm_l2() < 1e-3);
        assert!(a.sub(&exact).norm_l2() / exact.norm_l2() < 1e-2);
    }
}
