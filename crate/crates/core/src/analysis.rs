//! Measurements on operators and trajectories: the pressure operator and its
//! semigroup, decay fits, energy audits, smoothing diagnostics and ensembles.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::dynamics::{integrate, step_count, FullSystem, SimState, SolverConfig};
use crate::error::{Error, Result};
use crate::grid::{div, grad, laplacian, Grid, ScalarField, SineBasis, VectorField};
use crate::linalg::{symmetry_defect, CgOptions, DirichletPoisson, MeanZeroBasis};
use crate::physics::{apply_fprime, convective, eval_f, EnergyEvaluator, MediumMatrix};
use crate::rng::SeededRng;

/// Dense work is refused above this many grid nodes.
pub const DENSE_NODE_LIMIT: usize = 4096;

/// `𝔄 = -div(D(-Δ)⁻¹∇·)` as a dense matrix in mean-zero coordinates.
#[derive(Debug, Clone)]
pub struct AssembledOperator {
    grid: Grid,
    pub matrix: DMatrix<f64>,
    pub basis: MeanZeroBasis,
    /// Ascending.
    pub spectrum: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

pub fn assemble_operator(grid: &Grid, d: &MediumMatrix) -> Result<AssembledOperator> {
    if grid.len() > DENSE_NODE_LIMIT {
        return Err(Error::SizeGuard { size: grid.len(), limit: DENSE_NODE_LIMIT });
    }
    if d.dim() != grid.dim() {
        return Err(Error::invalid("medium matrix dimension does not match the grid"));
    }
    let basis = MeanZeroBasis::new(grid.len());
    let m = basis.reduced_len();
    let poisson = DirichletPoisson::new(*grid);
    let opts = CgOptions { tol: 1e-14, max_iter: 200 };
    let mut matrix = DMatrix::zeros(m, m);
    let mut e = vec![0.0; m];
    for j in 0..m {
        e[j] = 1.0;
        let p = ScalarField::from_values(*grid, basis.lift(&e))?;
        e[j] = 0.0;
        let w = poisson.solve(&grad(&p), opts)?;
        let col = div(&w.apply_medium(d)).scaled(-1.0);
        matrix.set_column(j, &DVector::from_vec(basis.restrict(col.values())));
    }
    let sym = (&matrix + matrix.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let spectrum = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors = DMatrix::from_fn(m, m, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(AssembledOperator { grid: *grid, matrix, basis, spectrum, eigenvectors })
}

impl AssembledOperator {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn symmetry_defect(&self) -> f64 {
        symmetry_defect(&self.matrix)
    }

    pub fn eig_min(&self) -> f64 {
        self.spectrum[0]
    }

    pub fn eig_max(&self) -> f64 {
        *self.spectrum.last().expect("nonempty spectrum")
    }

    /// Eigenvector `i` (ascending order) lifted to a mean-zero pressure.
    pub fn eigenvector(&self, i: usize) -> Result<ScalarField> {
        let col: Vec<f64> = self.eigenvectors.column(i).iter().copied().collect();
        ScalarField::from_values(self.grid, self.basis.lift(&col))
    }

    /// `exp(-t 𝔄) p` through the eigendecomposition.
    pub fn propagate(&self, p: &ScalarField, t: f64) -> Result<ScalarField> {
        self.grid.check_same(p.grid())?;
        let y = DVector::from_vec(self.basis.restrict(p.values()));
        let mut c = self.eigenvectors.transpose() * y;
        for (ci, li) in c.iter_mut().zip(&self.spectrum) {
            *ci *= (-li * t).exp();
        }
        let out = &self.eigenvectors * c;
        ScalarField::from_values(self.grid, self.basis.lift(out.as_slice()))
    }
}

/// Log-linear least-squares fit `v ≈ c e^{rate t}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub c: f64,
    pub rate: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
}

fn window_points(series: &[(f64, f64)], window: (f64, f64)) -> Result<Vec<(f64, f64)>> {
    let pts: Vec<(f64, f64)> = series.iter().copied().filter(|(t, _)| *t >= window.0 && *t <= window.1).collect();
    if pts.len() < 5 {
        return Err(Error::invalid(format!(
            "decay fit needs at least 5 points in [{}, {}], got {}",
            window.0,
            window.1,
            pts.len()
        )));
    }
    if let Some((t, v)) = pts.iter().find(|(_, v)| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("decay fit needs positive values, got {v} at t = {t}")));
    }
    Ok(pts.into_iter().map(|(t, v)| (t, v.ln())).collect())
}

pub fn fit_decay(series: &[(f64, f64)], window: (f64, f64)) -> Result<DecayFit> {
    let pts = window_points(series, window)?;
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    let sty: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    let rate = sty / stt;
    let intercept = ym - rate * tm;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - rate * p.0).powi(2)).sum();
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - ym).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= 1e-24 * n {
        1.0
    } else {
        0.0
    };
    Ok(DecayFit { c: intercept.exp(), rate, r_squared, window })
}

/// Exponential upper envelope `C e^{K t}` of a positive series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Envelope {
    pub c: f64,
    pub k: f64,
    /// `max v(t) / (C e^{Kt}) - 1` over the window (≤ 0 up to rounding).
    pub max_excess: f64,
    /// Plain least-squares fit of the same data, for reference.
    pub least_squares: DecayFit,
}

impl Envelope {
    pub fn at(&self, t: f64) -> f64 {
        self.c * (self.k * t).exp()
    }
}

/// Tightest exponential envelope: the supporting line of the upper convex
/// hull of `(t, ln v)` at the mean sample time, which minimizes the mean
/// log-gap among all upper lines.
pub fn fit_envelope(series: &[(f64, f64)], window: (f64, f64)) -> Result<Envelope> {
    let least_squares = fit_decay(series, window)?;
    let mut pts = window_points(series, window)?;
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for p in pts.iter().copied() {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            // Pop b when it lies on or below the chord a → p.
            if (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let (a, b) = if hull.len() == 1 {
        (hull[0], (hull[0].0 + 1.0, hull[0].1))
    } else {
        let i = hull.windows(2).position(|w| w[1].0 >= tm).unwrap_or(hull.len() - 2);
        (hull[i], hull[i + 1])
    };
    let k = (b.1 - a.1) / (b.0 - a.0);
    let ln_c = a.1 - k * a.0;
    let max_excess = pts.iter().map(|p| (p.1 - ln_c - k * p.0).exp() - 1.0).fold(f64::NEG_INFINITY, f64::max);
    Ok(Envelope { c: ln_c.exp(), k, max_excess, least_squares })
}

/// Evolves 10 random mean-zero pressures (and only those) by
/// `exp(-t 𝔄)`, fits the decay of their discrete `H^δ` norms over
/// `[0, t_max]`, and returns the slowest (largest) fitted rate.
pub fn semigroup_decay(op: &AssembledOperator, delta: f64, t_max: f64, samples: usize, seed: u64) -> Result<DecayFit> {
    check_delta(delta)?;
    let mut rng = SeededRng::new(seed);
    let mut worst: Option<DecayFit> = None;
    for _ in 0..10 {
        let p0 = crate::grid::project_mean_zero(&rng.scalar_field(op.grid, 1.0));
        let fit = decay_of(op, &p0, delta, t_max, samples)?;
        if worst.is_none_or(|w| fit.rate > w.rate) {
            worst = Some(fit);
        }
    }
    Ok(worst.expect("ten samples"))
}

/// Decay fit of `‖exp(-t 𝔄) p₀‖_{H^δ}` for one initial pressure.
pub fn decay_of(op: &AssembledOperator, p0: &ScalarField, delta: f64, t_max: f64, samples: usize) -> Result<DecayFit> {
    check_delta(delta)?;
    if !(t_max > 0.0) || samples < 5 {
        return Err(Error::invalid("semigroup decay needs t_max > 0 and at least 5 samples"));
    }
    let sine = SineBasis::new(op.grid);
    let series: Vec<(f64, f64)> = (0..samples)
        .map(|i| {
            let t = t_max * i as f64 / (samples - 1) as f64;
            op.propagate(p0, t).map(|p| (t, sine.spectral_norm(p.values(), delta)))
        })
        .collect::<Result<_>>()?;
    fit_decay(&series, (0.0, t_max))
}

fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::invalid(format!("delta must lie in [0, 1], got {delta}")));
    }
    Ok(())
}

/// One row of the energy audit, attached to the interval `[t - dt, t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditRow {
    pub t: f64,
    /// `½ΔE + trapezoid of (dissipation + f work + convective work - g work)`.
    pub residual_trapezoid: f64,
    /// Same with the endpoint derivative correction `dt²/12 (w'(t-dt) - w'(t))`.
    pub residual: f64,
    pub e_plain: f64,
}

/// Evaluation of the inequality `d𝓔_ε/dt + ε𝓔_ε ≤ C(ε⁶𝓔_ε³ + ‖g‖² + 1)` at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpRow {
    pub t: f64,
    pub e_eps: f64,
    pub lhs: f64,
    pub rhs: f64,
}

impl GpRow {
    pub fn violation(&self) -> f64 {
        (self.lhs - self.rhs).max(0.0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct AuditReport {
    pub dt: f64,
    pub rows: Vec<AuditRow>,
    pub gp: Vec<GpRow>,
}

impl AuditReport {
    /// `Σ |r_i| dt` of the corrected residual.
    pub fn integrated_residual(&self) -> f64 {
        self.rows.iter().map(|r| r.residual.abs()).sum::<f64>() * self.dt
    }

    /// `Σ |r_i| dt` of the plain trapezoid residual.
    pub fn integrated_trapezoid_residual(&self) -> f64 {
        self.rows.iter().map(|r| r.residual_trapezoid.abs()).sum::<f64>() * self.dt
    }

    pub fn max_gp_violation(&self) -> f64 {
        self.gp.iter().map(GpRow::violation).fold(0.0, f64::max)
    }
}

/// Work rate `w = (−Δu, Du) + (f(u), Du) + (B(u,u), Du) − (g, Du)` and its
/// time derivative along the flow.
fn work_rate(system: &FullSystem, s: &SimState) -> Result<(f64, f64)> {
    let d = &system.d;
    let g = system.forcing.at(s.t);
    let (ut, _) = system.rhs(&s.u, &s.p, s.t)?;
    let du = s.u.apply_medium(d);
    let dut = ut.apply_medium(d);
    let lap = laplacian(&s.u);
    let mut w = -lap.dot(&du) - g.dot(&du);
    let mut wt = -2.0 * lap.dot(&dut) - g.dot(&dut);
    if system.forcing.is_time_dependent() {
        let eps = 1e-6;
        let gt = system.forcing.at(s.t + eps).sub(&system.forcing.at((s.t - eps).max(0.0)));
        wt -= gt.dot(&du) / (s.t + eps - (s.t - eps).max(0.0));
    }
    if !system.params.is_zero() {
        let fu = eval_f(&s.u, &system.params);
        w += fu.dot(&du);
        wt += apply_fprime(&s.u, &ut, &system.params)?.dot(&du) + fu.dot(&dut);
    }
    if system.convective {
        let b = convective(&s.u, &s.u)?;
        w += b.dot(&du);
        let bt = convective(&ut, &s.u)?.add(&convective(&s.u, &ut)?);
        wt += bt.dot(&du) + b.dot(&dut);
    }
    Ok((w, wt))
}

/// Streaming form of [`energy_audit`]: feed states one step apart.
pub struct EnergyAuditor<'a> {
    system: &'a FullSystem,
    eps: f64,
    gp_constant: f64,
    gp_stride: usize,
    eval: Option<EnergyEvaluator>,
    prev: Option<(f64, f64, f64, f64)>,
    seen: usize,
    report: AuditReport,
}

impl<'a> EnergyAuditor<'a> {
    pub fn new(system: &'a FullSystem, eps: f64, gp_constant: f64, gp_stride: usize) -> Self {
        Self {
            system,
            eps,
            gp_constant,
            gp_stride: gp_stride.max(1),
            eval: (eps > 0.0).then(|| EnergyEvaluator::new(*system.grid())),
            prev: None,
            seen: 0,
            report: AuditReport::default(),
        }
    }

    pub fn push(&mut self, s: &SimState) -> Result<()> {
        let d = &self.system.d;
        let e = s.u.apply_medium(d).dot(&s.u) + s.p.dot(&s.p);
        let (w, wt) = work_rate(self.system, s)?;
        if let Some((t0, e0, w0, wt0)) = self.prev {
            let dt = s.t - t0;
            if self.report.rows.is_empty() {
                self.report.dt = dt;
            } else if (dt - self.report.dt).abs() > 1e-9 * self.report.dt {
                return Err(Error::invalid("energy audit needs a uniform time step"));
            }
            let trap = 0.5 * (e - e0) + 0.5 * dt * (w0 + w);
            self.report.rows.push(AuditRow {
                t: s.t,
                residual_trapezoid: trap,
                residual: trap + dt * dt / 12.0 * (wt0 - wt),
                e_plain: e,
            });
        }
        if let Some(eval) = &self.eval {
            if self.seen % self.gp_stride == 0 {
                self.report.gp.push(gp_row(self.system, eval, s, self.eps, self.gp_constant)?);
            }
        }
        self.prev = Some((s.t, e, w, wt));
        self.seen += 1;
        Ok(())
    }

    pub fn rows(&self) -> &[AuditRow] {
        &self.report.rows
    }

    pub fn finish(self) -> AuditReport {
        self.report
    }
}

/// Audits `½ d/dt (‖u‖²_D + ‖p‖²) = −w` along a uniform-step trajectory and,
/// every `gp_stride` states, the perturbed-energy inequality with constant
/// `gp_constant` (skipped when `eps = 0`).
pub fn energy_audit(
    trajectory: &[SimState],
    system: &FullSystem,
    eps: f64,
    gp_constant: f64,
    gp_stride: usize,
) -> Result<AuditReport> {
    let mut auditor = EnergyAuditor::new(system, eps, gp_constant, gp_stride);
    for s in trajectory {
        auditor.push(s)?;
    }
    Ok(auditor.finish())
}

fn gp_row(system: &FullSystem, eval: &EnergyEvaluator, s: &SimState, eps: f64, c: f64) -> Result<GpRow> {
    let d = &system.d;
    let (ut, pt) = system.rhs(&s.u, &s.p, s.t)?;
    let bp = eval.bogovski().apply(&s.p)?.field;
    let bpt = eval.bogovski().apply(&pt)?.field;
    let e_eps = s.u.apply_medium(d).dot(&s.u) + s.p.dot(&s.p) + 2.0 * eps * s.u.dot(&bp);
    let (w, _) = work_rate(system, s)?;
    let de = -2.0 * w + 2.0 * eps * (ut.dot(&bp) + s.u.dot(&bpt));
    let g = system.forcing.at(s.t);
    Ok(GpRow {
        t: s.t,
        e_eps,
        lhs: de + eps * e_eps,
        rhs: c * (eps.powi(6) * e_eps.powi(3) + g.dot(&g) + 1.0),
    })
}

/// Names of the weighted quantities in a [`SmoothingReport`].
pub const WEIGHT_T_GRAD_U: &str = "t*|grad u|^2";
pub const WEIGHT_T2_UT: &str = "t^2*|u_t|^2";
pub const WEIGHT_T_PT: &str = "t*|p_t|^2";
pub const WEIGHT_T83_UT: &str = "t^(8/3)*|u_t|^2";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingRow {
    pub t: f64,
    pub t_grad_u: f64,
    pub t2_ut: f64,
    pub t_pt: f64,
    pub t83_ut: f64,
}

#[derive(Debug, Clone)]
pub struct SmoothingReport {
    pub weighted_sups: BTreeMap<String, f64>,
    pub grid_tag: String,
    pub rows: Vec<SmoothingRow>,
}

/// Weighted norms along stored states with `0 < t ≤ 1`; time derivatives
/// come from the system right-hand side.
pub fn smoothing_report(trajectory: &[SimState], system: &FullSystem) -> Result<SmoothingReport> {
    let Some(first) = trajectory.first() else {
        return Err(Error::invalid("smoothing report needs a nonempty trajectory"));
    };
    let sine = SineBasis::new(*first.grid());
    let mut rows = Vec::new();
    for s in trajectory.iter().filter(|s| s.t > 0.0 && s.t <= 1.0 + 1e-12) {
        let (ut, pt) = system.rhs(&s.u, &s.p, s.t)?;
        let ut2 = ut.dot(&ut);
        rows.push(SmoothingRow {
            t: s.t,
            t_grad_u: s.t * sine.spectral_norm_vector(&s.u, 1.0).powi(2),
            t2_ut: s.t * s.t * ut2,
            t_pt: s.t * pt.dot(&pt),
            t83_ut: s.t.powf(8.0 / 3.0) * ut2,
        });
    }
    let sup = |f: fn(&SmoothingRow) -> f64| rows.iter().map(f).fold(0.0, f64::max);
    let mut weighted_sups = BTreeMap::new();
    weighted_sups.insert(WEIGHT_T_GRAD_U.to_string(), sup(|r| r.t_grad_u));
    weighted_sups.insert(WEIGHT_T2_UT.to_string(), sup(|r| r.t2_ut));
    weighted_sups.insert(WEIGHT_T_PT.to_string(), sup(|r| r.t_pt));
    weighted_sups.insert(WEIGHT_T83_UT.to_string(), sup(|r| r.t83_ut));
    Ok(SmoothingReport { weighted_sups, grid_tag: first.grid().to_string(), rows })
}

/// States at roughly geometric times `t_end · 2^{-j}` (rounded to whole
/// steps) plus `t = 0`, from one uniform-step run.
pub fn geometric_trajectory(system: &FullSystem, initial: &SimState, cfg: &SolverConfig, t_end: f64, levels: usize) -> Result<Vec<SimState>> {
    let steps = step_count(t_end, cfg.dt)?;
    let mut marks: Vec<usize> = (0..levels)
        .map(|j| ((steps as f64) / 2f64.powf(j as f64 * 0.5)).round() as usize)
        .filter(|&k| k >= 1)
        .collect();
    marks.extend(1..=steps.min(4));
    marks.sort_unstable();
    marks.dedup();
    let mut out = Vec::new();
    integrate(system, initial, cfg, t_end, |k, s| {
        if k == 0 || marks.binary_search(&k).is_ok() {
            out.push(s.clone());
        }
        Ok(())
    })?;
    Ok(out)
}

/// Random smooth state with `‖u‖²_{H¹} + ‖p‖² = e_norm²`, split evenly
/// between `u` and `p` before scaling.
pub fn smooth_initial_state(grid: Grid, rng: &mut SeededRng, e_norm: f64, kmax: usize) -> SimState {
    let sine = SineBasis::new(grid);
    let u = rng.smooth_vector_field(grid, kmax);
    let p = crate::grid::project_mean_zero(&rng.smooth_scalar_field(grid, kmax));
    let (a, b) = (sine.spectral_norm_vector(&u, 1.0), p.norm_l2());
    let (u, p) = (u.scaled(1.0 / a), p.scaled(1.0 / b));
    let s = (0.5f64).sqrt() * e_norm;
    SimState { u: u.scaled(s), p: p.scaled(s), t: 0.0 }
}

/// `E`-norm of a state.
pub fn e_norm(sine: &SineBasis, s: &SimState) -> f64 {
    s.e_norm_sq(sine).sqrt()
}

/// `dist_E(ξ, {η : ‖η‖_{E¹} ≤ R})`, exact in the sine basis: with
/// coordinates `c_j`, `E`-weights `a_j` and `E¹`-weights `b_j`, the nearest
/// point is `a_j c_j / (a_j + ν b_j)` with `ν ≥ 0` fixed by the constraint.
pub fn dist_to_e1_ball(sine: &SineBasis, s: &SimState, r: f64) -> f64 {
    let grid = *sine.grid();
    let vol = grid.cell_volume();
    let lam = sine.eigenvalues();
    let mut terms: Vec<(f64, f64, f64)> = Vec::with_capacity((grid.dim() + 1) * grid.len());
    for c in 0..grid.dim() {
        for (cj, lj) in sine.forward(s.u.component(c)).into_iter().zip(lam) {
            terms.push((vol * lj, vol * lj * lj, cj));
        }
    }
    for (cj, lj) in sine.forward(s.p.values()).into_iter().zip(lam) {
        terms.push((vol, vol * lj, cj));
    }
    let e1 = |nu: f64| -> f64 {
        terms.iter().map(|&(a, b, c)| { let x = a * c / (a + nu * b); b * x * x }).sum()
    };
    if e1(0.0) <= r * r {
        return 0.0;
    }
    let mut hi = 1.0;
    while e1(hi) > r * r {
        hi *= 2.0;
        if hi > 1e300 {
            break;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if e1(mid) > r * r {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    let nu = hi;
    terms
        .iter()
        .map(|&(a, b, c)| {
            let x = a * c / (a + nu * b);
            a * (c - x) * (c - x)
        })
        .sum::<f64>()
        .sqrt()
}

/// Number of occupied boxes of side `scale` after normalizing `points` to
/// the unit square.
pub fn box_count(points: &[(f64, f64)], scale: f64) -> usize {
    if points.is_empty() {
        return 0;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let norm = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    let cells = (1.0 / scale).ceil() as i64;
    let mut boxes: Vec<(i64, i64)> = points
        .iter()
        .map(|&(x, y)| {
            let i = ((norm(x, x0, x1) / scale).floor() as i64).min(cells - 1);
            let j = ((norm(y, y0, y1) / scale).floor() as i64).min(cells - 1);
            (i, j)
        })
        .collect();
    boxes.sort_unstable();
    boxes.dedup();
    boxes.len()
}

#[derive(Debug, Clone)]
pub struct AttractorReport {
    pub ensemble_size: usize,
    pub diam_series: Vec<(f64, f64)>,
    pub dist_to_ball_series: Vec<(f64, f64)>,
    pub r_ball: f64,
    /// Scales `2^{-1} … 2^{-6}` and their box counts.
    pub box_counts: Vec<(f64, usize)>,
    /// Per-member `(t, ‖u‖_{H¹}, ‖p‖)` samples.
    pub projections: Vec<Vec<(f64, f64, f64)>>,
}

/// Evolves every member over `[0, t_max]`, sampling every `sample_every`
/// time units. The ball radius is twice the largest `E¹` norm of member
/// `reference` over the last quarter of the run.
pub fn ensemble_study(
    initial_states: &[SimState],
    cfg: &SolverConfig,
    system: &FullSystem,
    t_max: f64,
    sample_every: f64,
    reference: usize,
) -> Result<AttractorReport> {
    let Some(first) = initial_states.first() else {
        return Err(Error::invalid("ensemble must contain at least one state"));
    };
    let grid = *first.grid();
    for s in initial_states {
        grid.check_same(s.grid())?;
    }
    if reference >= initial_states.len() {
        return Err(Error::invalid("reference member index out of range"));
    }
    cfg.validate(&grid, &system.d)?;
    let stride = step_count(sample_every, cfg.dt)?;
    step_count(t_max, cfg.dt)?;
    let runs: Vec<Vec<SimState>> = initial_states
        .par_iter()
        .enumerate()
        .map(|(member, s0)| {
            let mut snaps = Vec::new();
            integrate(system, s0, cfg, t_max, |k, s| {
                if k % stride == 0 {
                    snaps.push(s.clone());
                }
                Ok(())
            })
            .map_err(|e| Error::EnsembleMember { member, source: Box::new(e) })?;
            Ok(snaps)
        })
        .collect::<Result<_>>()?;
    let sine = SineBasis::new(grid);
    let n_snap = runs[0].len();
    let times: Vec<f64> = runs[0].iter().map(|s| s.t).collect();
    let quarter = times.iter().position(|&t| t >= 0.75 * t_max - 1e-9).unwrap_or(0);
    let r_ball = 2.0 * runs[reference][quarter..].iter().map(|s| s.e1_norm_sq(&sine).sqrt()).fold(0.0, f64::max);
    let mut diam_series = Vec::with_capacity(n_snap);
    let mut dist_to_ball_series = Vec::with_capacity(n_snap);
    for k in 0..n_snap {
        let mut diam: f64 = 0.0;
        for i in 0..runs.len() {
            for j in i + 1..runs.len() {
                diam = diam.max(runs[i][k].difference(&runs[j][k]).e_norm_sq(&sine).sqrt());
            }
        }
        diam_series.push((times[k], diam));
        let dist = runs.iter().map(|r| dist_to_e1_ball(&sine, &r[k], r_ball)).fold(0.0, f64::max);
        dist_to_ball_series.push((times[k], dist));
    }
    let projections: Vec<Vec<(f64, f64, f64)>> = runs
        .iter()
        .map(|r| r.iter().map(|s| (s.t, sine.spectral_norm_vector(&s.u, 1.0), s.p.norm_l2())).collect())
        .collect();
    let points: Vec<(f64, f64)> = projections.iter().flatten().map(|&(_, a, b)| (a, b)).collect();
    let box_counts = (1..=6).map(|k| {
        let scale = 0.5f64.powi(k);
        (scale, box_count(&points, scale))
    }).collect();
    Ok(AttractorReport {
        ensemble_size: initial_states.len(),
        diam_series,
        dist_to_ball_series,
        r_ball,
        box_counts,
        projections,
    })
}

impl AttractorReport {
    /// Decay fit of the positive part of the distance series from `t_start`
    /// up to the first time it reaches zero.
    pub fn dist_fit(&self, t_start: f64) -> Result<DecayFit> {
        let positive: Vec<(f64, f64)> = self
            .dist_to_ball_series
            .iter()
            .copied()
            .filter(|&(t, _)| t >= t_start)
            .take_while(|&(_, d)| d > 0.0)
            .collect();
        let end = positive.last().map(|p| p.0).unwrap_or(t_start);
        fit_decay(&positive, (t_start, end))
    }

    pub fn dist_at(&self, t: f64) -> Option<f64> {
        self.dist_to_ball_series.iter().find(|(s, _)| (s - t).abs() < 1e-9).map(|p| p.1)
    }
}

/// Lifted eigenvector residual `‖𝔄v - λv‖` (used by tests and the CLI).
pub fn eigen_residual(op: &AssembledOperator, i: usize) -> f64 {
    let v = op.eigenvectors.column(i);
    (&op.matrix * v - v * op.spectrum[i]).norm()
}

/// Divergence applied to the Bogovski field, relative to `p` (helper for
/// reporting; the check lives in physics).
pub fn bogovski_defect(p: &ScalarField) -> Result<f64> {
    let res = crate::physics::bogovski(p)?;
    let pm = crate::grid::project_mean_zero(p);
    Ok(div(&res.field).sub(&pm).norm_l2() / pm.norm_l2().max(f64::MIN_POSITIVE))
}

/// Relative skew defect `|(B(u,v), v)| / (‖u‖‖v‖²)`.
pub fn skew_defect(u: &VectorField, v: &VectorField) -> Result<f64> {
    let b = convective(u, v)?;
    Ok(b.dot(v).abs() / (u.norm_l2() * v.norm_l2().powi(2)).max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{Forcing, NonlinearityParams};
    use crate::reference::DenseOperators;

    #[test]
    fn small_operator_properties() {
        let g = Grid::new(2, 4).unwrap();
        let op = assemble_operator(&g, &MediumMatrix::identity(2)).unwrap();
        assert!(op.symmetry_defect() <= 1e-12);
        assert!(op.eig_min() > 0.0);
        let op3 = assemble_operator(&g, &MediumMatrix::identity(2).scaled(3.0).unwrap()).unwrap();
        for (a, b) in op.spectrum.iter().zip(&op3.spectrum) {
            assert!((b / 3.0 - a).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn operator_matches_dense_construction() {
        let g = Grid::new(2, 8).unwrap();
        let d = MediumMatrix::diagonal(&[1.0, 2.0]).unwrap();
        let op = assemble_operator(&g, &d).unwrap();
        let dense = DenseOperators::new(&g);
        let n = g.len();
        let linv = (-&dense.laplacian).try_inverse().unwrap();
        let mut blk = DMatrix::zeros(2 * n, 2 * n);
        for c in 0..2 {
            blk.view_mut((c * n, c * n), (n, n)).copy_from(&linv);
        }
        let q = MeanZeroBasis::new(n).matrix();
        let brute = -(q.transpose() * dense.div_medium(&d) * blk * dense.gradient() * &q);
        let rel = (&brute - &op.matrix).norm() / brute.norm();
        assert!(rel < 1e-11, "{rel}");
        let sym = (&brute + brute.transpose()) * 0.5;
        let emin = SymmetricEigen::new(sym).eigenvalues.min();
        assert!(emin > 0.0);
        assert!((emin - op.eig_min()).abs() <= 1e-9 * emin.max(1e-3));
    }

    #[test]
    fn size_guard() {
        let g = Grid::new(3, 18).unwrap();
        assert!(matches!(assemble_operator(&g, &MediumMatrix::identity(3)), Err(Error::SizeGuard { .. })));
    }

    #[test]
    fn fit_decay_exact_and_constant() {
        let s: Vec<(f64, f64)> = (0..10).map(|i| { let t = i as f64 * 0.1; (t, 2.0 * (-3.0 * t).exp()) }).collect();
        let f = fit_decay(&s, (0.0, 1.0)).unwrap();
        assert!((f.c - 2.0).abs() < 1e-12 && (f.rate + 3.0).abs() < 1e-12 && (f.r_squared - 1.0).abs() < 1e-12);
        let c: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 4.0)).collect();
        assert!(fit_decay(&c, (0.0, 10.0)).unwrap().rate.abs() < 1e-12);
        let mut rng = SeededRng::new(2);
        let noisy: Vec<(f64, f64)> = (0..50).map(|i| { let t = i as f64 * 0.1; (t, 5.0 * (-t).exp() + 1e-6 * rng.normal()) }).collect();
        let f = fit_decay(&noisy, (0.0, 5.0)).unwrap();
        assert!((-1.01..=-0.99).contains(&f.rate), "{}", f.rate);
        assert!(fit_decay(&s[..4], (0.0, 1.0)).is_err());
        let mut bad = s.clone();
        bad[3].1 = 0.0;
        assert!(fit_decay(&bad, (0.0, 1.0)).is_err());
    }

    #[test]
    fn envelope_is_upper_and_tight() {
        let s: Vec<(f64, f64)> = (0..40).map(|i| { let t = i as f64 * 0.05; (t, (1.0 + 0.3 * (5.0 * t).sin()) * (0.5 * t).exp()) }).collect();
        let env = fit_envelope(&s, (0.0, 2.0)).unwrap();
        assert!(env.max_excess <= 1e-12);
        assert!(env.k.is_finite());
        // Touches the data at least at one point.
        let touch = s.iter().map(|&(t, v)| v / env.at(t)).fold(0.0, f64::max);
        assert!((touch - 1.0).abs() < 1e-12);
        let exact: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 3.0 * (0.2 * i as f64).exp())).collect();
        let e = fit_envelope(&exact, (0.0, 9.0)).unwrap();
        assert!((e.k - 0.2).abs() < 1e-12 && (e.c - 3.0).abs() < 1e-11);
    }

    #[test]
    fn semigroup_decay_oracles() {
        let g = Grid::new(2, 8).unwrap();
        let op = assemble_operator(&g, &MediumMatrix::diagonal(&[1.0, 2.0]).unwrap()).unwrap();
        let f0 = semigroup_decay(&op, 0.0, 20.0, 41, 1).unwrap();
        assert!(f0.rate <= -op.eig_min() * 0.95, "{} vs {}", f0.rate, op.eig_min());
        assert!(semigroup_decay(&op, 1.0, 20.0, 41, 1).unwrap().rate < 0.0);
        let v = op.eigenvector(0).unwrap();
        for delta in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let f = decay_of(&op, &v, delta, 20.0, 41).unwrap();
            assert!((f.rate + op.eig_min()).abs() <= 1e-6, "{delta}: {} vs {}", f.rate, -op.eig_min());
        }
        assert!(eigen_residual(&op, 0) < 1e-10);
    }

    #[test]
    fn zero_trajectory_audit() {
        let g = Grid::new(2, 8).unwrap();
        let d = MediumMatrix::diagonal(&[1.0, 2.0]).unwrap();
        let sys = FullSystem::new(d, NonlinearityParams::quintic(), Forcing::zero(g), false).unwrap();
        let traj: Vec<SimState> = (0..5).map(|i| SimState { t: i as f64 * 0.01, ..SimState::zero(g) }).collect();
        let rep = energy_audit(&traj, &sys, 0.1, 1.0, 1).unwrap();
        assert!(rep.rows.iter().all(|r| r.residual == 0.0 && r.residual_trapezoid == 0.0));
        assert!(rep.max_gp_violation() == 0.0);
    }

    #[test]
    fn audit_orders_linear() {
        let g = Grid::new(2, 8).unwrap();
        let d = MediumMatrix::diagonal(&[1.0, 2.0]).unwrap();
        let sys = FullSystem::linear(d.clone(), g);
        let mut rng = SeededRng::new(5);
        let s0 = smooth_initial_state(g, &mut rng, 1.0, 3);
        let dt0 = SolverConfig::stable_dt(&g, &d, 0.9, 0.2);
        let mut l1 = vec![];
        let mut trap = vec![];
        for lvl in 0..2 {
            let cfg = SolverConfig { dt: dt0 / 2f64.powi(lvl), ..Default::default() };
            let traj = crate::dynamics::trajectory(&sys, &s0, &cfg, 0.2, 1).unwrap();
            let rep = energy_audit(&traj, &sys, 0.0, 1.0, 1).unwrap();
            l1.push(rep.integrated_residual());
            trap.push(rep.integrated_trapezoid_residual());
        }
        assert!(l1[0] / l1[1] >= 8.0, "{l1:?}");
        // The plain trapezoid sits at its asymptotic factor 8.
        assert!((trap[0] / trap[1] - 8.0).abs() < 0.1, "{trap:?}");
    }

    #[test]
    fn dist_to_ball_geometry() {
        let g = Grid::new(2, 8).unwrap();
        let sine = SineBasis::new(g);
        let mut rng = SeededRng::new(11);
        let s = smooth_initial_state(g, &mut rng, 2.0, 3);
        let r1 = s.e1_norm_sq(&sine).sqrt();
        assert_eq!(dist_to_e1_ball(&sine, &s, r1 * 1.01), 0.0);
        assert!((dist_to_e1_ball(&sine, &s, 0.0) - e_norm(&sine, &s)).abs() < 1e-12);
        // Monotone in R and bounded by the distance to the scaled state.
        let d_half = dist_to_e1_ball(&sine, &s, 0.5 * r1);
        assert!(d_half > 0.0 && d_half <= 0.5 * e_norm(&sine, &s) + 1e-12);
        assert!(dist_to_e1_ball(&sine, &s, 0.25 * r1) > d_half);
    }

    #[test]
    fn box_counts_nonincreasing() {
        let mut rng = SeededRng::new(3);
        let pts: Vec<(f64, f64)> = (0..500).map(|_| (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0))).collect();
        let counts: Vec<usize> = (1..=6).map(|k| box_count(&pts, 0.5f64.powi(k))).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(box_count(&[(1.0, 1.0); 4], 0.25), 1);
    }

    #[test]
    fn identical_ensemble_has_zero_diameter() {
        let g = Grid::new(2, 8).unwrap();
        let d = MediumMatrix::identity(2);
        let sys = FullSystem::new(d.clone(), NonlinearityParams::quintic(), Forcing::zero(g), false).unwrap();
        let s0 = smooth_initial_state(g, &mut SeededRng::new(1), 1.0, 3);
        let dt = SolverConfig::stable_dt(&g, &d, 0.9, 0.1);
        let cfg = SolverConfig { dt, ..Default::default() };
        let rep = ensemble_study(&[s0.clone(), s0.clone(), s0], &cfg, &sys, 0.4, 0.1, 0).unwrap();
        assert!(rep.diam_series.iter().all(|&(_, d)| d == 0.0));
        assert_eq!(rep.box_counts.len(), 6);
    }

    #[test]
    fn linear_ensemble_contracts() {
        let g = Grid::new(2, 8).unwrap();
        let d = MediumMatrix::diagonal(&[1.0, 2.0]).unwrap();
        let sys = FullSystem::linear(d.clone(), g);
        let mut rng = SeededRng::new(21);
        let states: Vec<SimState> = [0.5, 1.0, 2.0].iter().map(|&a| smooth_initial_state(g, &mut rng, a, 3)).collect();
        let dt = SolverConfig::stable_dt(&g, &d, 0.9, 0.5);
        let cfg = SolverConfig { dt, ..Default::default() };
        let rep = ensemble_study(&states, &cfg, &sys, 8.0, 0.5, 0).unwrap();
        let fit = fit_decay(&rep.diam_series, (0.0, 8.0)).unwrap();
        assert!(fit.rate < 0.0);
        let dist = &rep.dist_to_ball_series;
        assert!(dist.last().unwrap().1 < dist[0].1);
    }
}
