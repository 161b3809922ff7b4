//! Independent oracles.
//!
//! Nothing in here calls the production stencils: the dense propagator is
//! assembled from Kronecker products of 1D difference matrices, the periodic
//! solutions are closed forms, and the residual checkers walk neighbours by
//! explicit index arithmetic.

use nalgebra::{Complex, DMatrix, DVector};

use crate::dynamics::SimState;
use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField, VectorField};
use crate::linalg::MeanZeroBasis;
use crate::physics::{MediumMatrix, NonlinearityParams};

/// Largest interior size per axis accepted by [`build_propagator`].
pub const PROPAGATOR_MAX_N_2D: usize = 8;
pub const PROPAGATOR_MAX_N_3D: usize = 6;

fn second_difference(n: usize, h: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            -2.0 / (h * h)
        } else if i.abs_diff(j) == 1 {
            1.0 / (h * h)
        } else {
            0.0
        }
    })
}

fn central_difference(n: usize, h: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if j == i + 1 {
            0.5 / h
        } else if i == j + 1 {
            -0.5 / h
        } else {
            0.0
        }
    })
}

/// `I ⊗ … ⊗ A ⊗ … ⊗ I` acting on `axis` (axis 0 varies fastest).
fn along_axis(a: &DMatrix<f64>, axis: usize, dim: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::<f64>::identity(1, 1);
    for ax in (0..dim).rev() {
        let factor = if ax == axis { a.clone() } else { DMatrix::identity(n, n) };
        out = out.kronecker(&factor);
    }
    out
}

/// Dense Dirichlet operators of one grid, built from 1D matrices.
#[derive(Debug, Clone)]
pub struct DenseOperators {
    pub laplacian: DMatrix<f64>,
    /// One `N × N` central difference per axis.
    pub partials: Vec<DMatrix<f64>>,
}

impl DenseOperators {
    pub fn new(grid: &Grid) -> Self {
        let (n, h, dim) = (grid.n(), grid.h(), grid.dim());
        let t = second_difference(n, h);
        let c = central_difference(n, h);
        let mut laplacian = DMatrix::zeros(grid.len(), grid.len());
        let mut partials = Vec::with_capacity(dim);
        for axis in 0..dim {
            laplacian += along_axis(&t, axis, dim);
            partials.push(along_axis(&c, axis, dim));
        }
        Self { laplacian, partials }
    }

    /// Stacked gradient `(dN) × N`.
    pub fn gradient(&self) -> DMatrix<f64> {
        let big_n = self.laplacian.nrows();
        let dim = self.partials.len();
        let mut g = DMatrix::zeros(dim * big_n, big_n);
        for (a, pa) in self.partials.iter().enumerate() {
            g.view_mut((a * big_n, 0), (big_n, big_n)).copy_from(pa);
        }
        g
    }

    /// Divergence of `D u` as an `N × (dN)` matrix.
    pub fn div_medium(&self, d: &MediumMatrix) -> DMatrix<f64> {
        let big_n = self.laplacian.nrows();
        let dim = self.partials.len();
        let mut m = DMatrix::zeros(big_n, dim * big_n);
        for a in 0..dim {
            for c in 0..dim {
                let dac = d.get(a, c);
                if dac != 0.0 {
                    let mut block = m.view_mut((0, c * big_n), (big_n, big_n));
                    block += &self.partials[a] * dac;
                }
            }
        }
        m
    }
}

/// Dense generator of the linear system on `(u, p)` with `p` expressed in
/// mean-zero coordinates, together with its exponential.
#[derive(Debug, Clone)]
pub struct DensePropagator {
    grid: Grid,
    basis: MeanZeroBasis,
    matrix: DMatrix<f64>,
    eigenvalues: Vec<Complex<f64>>,
}

/// Assembles `[[Δ, -G Q], [-Qᵀ div D, 0]]`.
pub fn build_propagator(grid: &Grid, d: &MediumMatrix) -> Result<DensePropagator> {
    let limit = if grid.dim() == 2 { PROPAGATOR_MAX_N_2D } else { PROPAGATOR_MAX_N_3D };
    if grid.n() > limit {
        return Err(Error::SizeGuard { size: grid.n(), limit });
    }
    if d.dim() != grid.dim() {
        return Err(Error::invalid("medium matrix dimension does not match the grid"));
    }
    let ops = DenseOperators::new(grid);
    let big_n = grid.len();
    let dim = grid.dim();
    let basis = MeanZeroBasis::new(big_n);
    let q = basis.matrix();
    let nu = dim * big_n;
    let m = nu + big_n - 1;
    let mut a = DMatrix::zeros(m, m);
    for c in 0..dim {
        a.view_mut((c * big_n, c * big_n), (big_n, big_n)).copy_from(&ops.laplacian);
    }
    a.view_mut((0, nu), (nu, big_n - 1)).copy_from(&(-(ops.gradient() * &q)));
    a.view_mut((nu, 0), (big_n - 1, nu)).copy_from(&(-(q.transpose() * ops.div_medium(d))));
    let eigenvalues = a.clone().complex_eigenvalues().iter().copied().collect();
    Ok(DensePropagator { grid: *grid, basis, matrix: a, eigenvalues })
}

impl DensePropagator {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn eigenvalues(&self) -> &[Complex<f64>] {
        &self.eigenvalues
    }

    pub fn max_real_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `exp(t A)` by Padé scaling and squaring.
    pub fn exp_at(&self, t: f64) -> DMatrix<f64> {
        if t == 0.0 {
            return DMatrix::identity(self.matrix.nrows(), self.matrix.ncols());
        }
        (&self.matrix * t).exp()
    }

    pub fn to_vector(&self, state: &SimState) -> Result<DVector<f64>> {
        self.grid.check_same(state.grid())?;
        let mut v = state.u.values().to_vec();
        v.extend(self.basis.restrict(state.p.values()));
        Ok(DVector::from_vec(v))
    }

    pub fn from_vector(&self, v: &DVector<f64>, t: f64) -> Result<SimState> {
        let nu = self.grid.dim() * self.grid.len();
        let u = VectorField::from_values(self.grid, v.as_slice()[..nu].to_vec())?;
        let p = ScalarField::from_values(self.grid, self.basis.lift(&v.as_slice()[nu..]))?;
        Ok(SimState { u, p, t })
    }

    /// Exact linear evolution of `state` by `t`.
    pub fn evolve(&self, state: &SimState, t: f64) -> Result<SimState> {
        let v = self.exp_at(t) * self.to_vector(state)?;
        self.from_vector(&v, state.t + t)
    }
}

/// Closed form of `exp(t M)` for `M = [[-μ, -1], [σ, 0]]`.
pub fn mode_exponential(mu: f64, sigma: f64, t: f64) -> [[f64; 2]; 2] {
    let tau = -0.5 * mu;
    let disc = tau * tau - sigma;
    let scale = 1e-14 * (tau * tau).max(sigma.abs()).max(1.0);
    // exp(tM) = ec I + es (M - τ I), with ec = e^{τt} c and es = e^{τt} s.
    let (ec, es) = if disc > scale {
        // Real eigenvalues τ ± w: combine the exponentials directly so stiff
        // modes do not overflow cosh.
        let w = disc.sqrt();
        let (ep, em) = (((tau + w) * t).exp(), ((tau - w) * t).exp());
        (0.5 * (ep + em), 0.5 * (ep - em) / w)
    } else if disc < -scale {
        let w = (-disc).sqrt();
        let e = (tau * t).exp();
        (e * (w * t).cos(), e * (w * t).sin() / w)
    } else {
        let e = (tau * t).exp();
        (e, e * t)
    };
    [[ec + es * (-mu - tau), -es], [es * sigma, ec - es * tau]]
}

/// Closed-form evolution of one Fourier mode of the periodic linear system
/// with `D = I` on the uniform periodic grid with `n` points per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSolution {
    pub k: Vec<i64>,
    /// Amplitude of the divergence-free part of `û` (heat mode), one complex
    /// number per direction orthogonal to the gradient symbol.
    pub solenoidal_amp: Vec<Complex<f64>>,
    /// `(φ̂, p̂)` with `û = i s φ̂ + solenoidal part`.
    pub potential_pair: [Complex<f64>; 2],
}

/// Symbols of the periodic 5/7-point Laplacian (`μ`, as `-Δ`) and of the
/// central gradient (`s`, with `∇ ↦ i s`) for wave vector `k`.
pub fn periodic_symbols(k: &[i64], n: usize) -> (f64, Vec<f64>) {
    let h = 1.0 / n as f64;
    let pi = std::f64::consts::PI;
    let mu = k.iter().map(|&ka| 4.0 / (h * h) * (pi * ka as f64 * h).sin().powi(2)).sum();
    let s = k.iter().map(|&ka| (2.0 * pi * ka as f64 * h).sin() / h).collect();
    (mu, s)
}

/// Solution of the periodic mode problem at time `t`. `n` selects the
/// discrete symbols; `init.k` must be nonzero.
pub fn periodic_mode_solution(init: &ModeSolution, n: usize, t: f64) -> Result<ModeSolution> {
    if init.k.iter().all(|&k| k == 0) {
        return Err(Error::invalid("k = 0 is the mean mode, excluded by the mean-zero constraint"));
    }
    let (mu, s) = periodic_symbols(&init.k, n);
    let sigma: f64 = s.iter().map(|x| x * x).sum();
    let heat = (-mu * t).exp();
    let e = mode_exponential(mu, sigma, t);
    let [phi, p] = init.potential_pair;
    Ok(ModeSolution {
        k: init.k.clone(),
        solenoidal_amp: init.solenoidal_amp.iter().map(|a| a * heat).collect(),
        potential_pair: [phi * e[0][0] + p * e[0][1], phi * e[1][0] + p * e[1][1]],
    })
}

/// Periodic test configuration of the linear system with `D = I`:
/// `n` points per axis at `x_j = j/n`, component-major like [`VectorField`].
#[derive(Debug, Clone, Copy)]
pub struct PeriodicGrid {
    pub dim: usize,
    pub n: usize,
}

impl PeriodicGrid {
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    fn neighbour(&self, idx: usize, axis: usize, step: isize) -> usize {
        let stride = self.n.pow(axis as u32);
        let i = (idx / stride) % self.n;
        let j = (i as isize + step).rem_euclid(self.n as isize) as usize;
        idx - i * stride + j * stride
    }

    fn coords(&self, idx: usize) -> Vec<f64> {
        (0..self.dim).map(|a| ((idx / self.n.pow(a as u32)) % self.n) as f64 * self.h()).collect()
    }

    /// Real nodal values `(u, p)` of the mode solution (real part of the
    /// complex amplitude times `e^{2πi k·x}`).
    pub fn sample(&self, mode: &ModeSolution) -> (Vec<f64>, Vec<f64>) {
        let (_, s) = periodic_symbols(&mode.k, self.n);
        let smag = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        let basis = solenoidal_directions(&s);
        let npts = self.len();
        let mut u = vec![0.0; self.dim * npts];
        let mut p = vec![0.0; npts];
        let [phi, ph] = mode.potential_pair;
        for idx in 0..npts {
            let x = self.coords(idx);
            let arg: f64 = mode.k.iter().zip(&x).map(|(&k, xa)| 2.0 * std::f64::consts::PI * k as f64 * xa).sum();
            let e = Complex::new(arg.cos(), arg.sin());
            p[idx] = (ph * e).re;
            for c in 0..self.dim {
                // Potential part i s φ̂; solenoidal part along the normalized directions.
                let mut amp = Complex::new(0.0, s[c]) * phi;
                if smag > 0.0 {
                    for (a, dir) in mode.solenoidal_amp.iter().zip(&basis) {
                        amp += a * dir[c];
                    }
                }
                u[c * npts + idx] = (amp * e).re;
            }
        }
        (u, p)
    }

    /// `(Δu - ∇p, -div u)` with periodic stencils.
    pub fn rhs(&self, u: &[f64], p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let npts = self.len();
        let h = self.h();
        let mut du = vec![0.0; self.dim * npts];
        let mut dp = vec![0.0; npts];
        for idx in 0..npts {
            for a in 0..self.dim {
                let (f, b) = (self.neighbour(idx, a, 1), self.neighbour(idx, a, -1));
                for c in 0..self.dim {
                    let o = c * npts;
                    du[o + idx] += (u[o + f] - 2.0 * u[o + idx] + u[o + b]) / (h * h);
                }
                du[a * npts + idx] -= (p[f] - p[b]) / (2.0 * h);
                dp[idx] -= (u[a * npts + f] - u[a * npts + b]) / (2.0 * h);
            }
        }
        (du, dp)
    }

    /// Classical RK4 from `(u, p)` over `steps` steps of size `dt`.
    pub fn integrate(&self, u: &mut Vec<f64>, p: &mut Vec<f64>, dt: f64, steps: usize) {
        let nu = u.len();
        let mut y: Vec<f64> = u.iter().chain(p.iter()).copied().collect();
        let f = |y: &[f64]| -> Vec<f64> {
            let (du, dp) = self.rhs(&y[..nu], &y[nu..]);
            du.into_iter().chain(dp).collect()
        };
        for _ in 0..steps {
            let k1 = f(&y);
            let y2: Vec<f64> = y.iter().zip(&k1).map(|(a, b)| a + 0.5 * dt * b).collect();
            let k2 = f(&y2);
            let y3: Vec<f64> = y.iter().zip(&k2).map(|(a, b)| a + 0.5 * dt * b).collect();
            let k3 = f(&y3);
            let y4: Vec<f64> = y.iter().zip(&k3).map(|(a, b)| a + dt * b).collect();
            let k4 = f(&y4);
            for i in 0..y.len() {
                y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        u.copy_from_slice(&y[..nu]);
        p.copy_from_slice(&y[nu..]);
    }
}

/// Orthonormal directions perpendicular to `s` (one in 2D, two in 3D).
fn solenoidal_directions(s: &[f64]) -> Vec<Vec<f64>> {
    let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Vec::new();
    }
    let e: Vec<f64> = s.iter().map(|x| x / norm).collect();
    if s.len() == 2 {
        return vec![vec![-e[1], e[0]]];
    }
    // Gram-Schmidt against the least aligned unit axis.
    let axis = (0..3).min_by(|&a, &b| e[a].abs().total_cmp(&e[b].abs())).unwrap_or(0);
    let mut v1: Vec<f64> = (0..3).map(|i| if i == axis { 1.0 } else { 0.0 } - e[axis] * e[i]).collect();
    let n1 = v1.iter().map(|x| x * x).sum::<f64>().sqrt();
    v1.iter_mut().for_each(|x| *x /= n1);
    let v2 = vec![e[1] * v1[2] - e[2] * v1[1], e[2] * v1[0] - e[0] * v1[2], e[0] * v1[1] - e[1] * v1[0]];
    vec![v1, v2]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualSystem {
    /// Stationarity of the full system: `|(du/dt, dp/dt)|`.
    Full,
    /// Elliptic equation `-Δu + ∇p + f(u) = g`.
    Truncated,
    /// Elliptic equation `-Δu + ∇p = g`.
    Linear,
}

fn brute_force_neighbour(grid: &Grid, values: &[f64], idx: usize, axis: usize, step: isize) -> f64 {
    let n = grid.n() as isize;
    let stride = grid.n().pow(axis as u32);
    let i = ((idx / stride) % grid.n()) as isize;
    let j = i + step;
    if j < 0 || j >= n {
        0.0
    } else {
        values[(idx as isize + step * stride as isize) as usize]
    }
}

/// Discrete residual norm (`h^d`-weighted ℓ²) of the chosen system at `state`.
pub fn residual_check(
    state: &SimState,
    g: &VectorField,
    d: &MediumMatrix,
    params: &NonlinearityParams,
    system: ResidualSystem,
) -> Result<f64> {
    let grid = *state.grid();
    grid.check_same(g.grid())?;
    let (npts, dim, h) = (grid.len(), grid.dim(), grid.h());
    let u = state.u.values();
    let p = state.p.values();
    // r = Δu - ∇p - f(u) + g, componentwise.
    let mut r = vec![0.0; dim * npts];
    let mut div_du = vec![0.0; npts];
    let du_field: Vec<f64> = (0..dim * npts)
        .map(|k| {
            let (c, i) = (k / npts, k % npts);
            (0..dim).map(|cc| d.get(c, cc) * u[cc * npts + i]).sum()
        })
        .collect();
    for i in 0..npts {
        let ui: Vec<f64> = (0..dim).map(|c| u[c * npts + i]).collect();
        let mut uu = [0.0; 3];
        uu[..dim].copy_from_slice(&ui);
        let fi = if system == ResidualSystem::Linear { [0.0; 3] } else { params.f_point(uu) };
        for c in 0..dim {
            let uc = &u[c * npts..(c + 1) * npts];
            let mut lap = 0.0;
            for a in 0..dim {
                lap += (brute_force_neighbour(&grid, uc, i, a, 1) - 2.0 * uc[i] + brute_force_neighbour(&grid, uc, i, a, -1)) / (h * h);
            }
            let dp = (brute_force_neighbour(&grid, p, i, c, 1) - brute_force_neighbour(&grid, p, i, c, -1)) / (2.0 * h);
            r[c * npts + i] = lap - dp - fi[c] + g.values()[c * npts + i];
            let dc = &du_field[c * npts..(c + 1) * npts];
            div_du[i] += (brute_force_neighbour(&grid, dc, i, c, 1) - brute_force_neighbour(&grid, dc, i, c, -1)) / (2.0 * h);
        }
    }
    let mut sum: f64 = r.iter().map(|x| x * x).sum();
    if system == ResidualSystem::Full {
        let mean = div_du.iter().sum::<f64>() / npts as f64;
        sum += div_du.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    }
    Ok((sum * grid.cell_volume()).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{solve_elliptic_u, SolverConfig};
    use crate::grid::{div, grad, laplacian, project_mean_zero};
    use crate::rng::SeededRng;

    #[test]
    fn dense_operators_match_stencils() {
        let g = Grid::new(2, 6).unwrap();
        let ops = DenseOperators::new(&g);
        let mut rng = SeededRng::new(3);
        let p = rng.scalar_field(g, 1.0);
        let u = rng.vector_field(g, 1.0);
        let gp = ops.gradient() * DVector::from_column_slice(p.values());
        assert!((gp - DVector::from_column_slice(grad(&p).values())).norm() < 1e-12);
        let d = MediumMatrix::identity(2);
        let du = ops.div_medium(&d) * DVector::from_column_slice(u.values());
        assert!((du - DVector::from_column_slice(div(&u).values())).norm() < 1e-12);
        let lap = laplacian(&u);
        for c in 0..2 {
            let lc = &ops.laplacian * DVector::from_column_slice(u.component(c));
            assert!((lc - DVector::from_column_slice(lap.component(c))).norm() < 1e-10);
        }
    }

    #[test]
    fn propagator_identity_and_semigroup() {
        let g = Grid::new(2, 6).unwrap();
        let d = MediumMatrix::diagonal(&[1.0, 2.0]).unwrap();
        let prop = build_propagator(&g, &d).unwrap();
        let m = prop.generator().nrows();
        assert!((prop.exp_at(0.0) - DMatrix::identity(m, m)).norm() <= 1e-13);
        let e1 = prop.exp_at(0.2);
        let e2 = prop.exp_at(0.3);
        let e12 = prop.exp_at(0.5);
        let mut rng = SeededRng::new(9);
        for _ in 0..5 {
            let v = DVector::from_fn(m, |_, _| rng.normal());
            let err = (&e1 * (&e2 * &v) - &e12 * &v).norm() / v.norm();
            assert!(err <= 1e-10, "{err}");
        }
        assert!(prop.max_real_eigenvalue() <= 1e-10);
    }

    #[test]
    fn propagator_size_guard() {
        let g = Grid::new(2, 10).unwrap();
        assert!(matches!(build_propagator(&g, &MediumMatrix::identity(2)), Err(Error::SizeGuard { .. })));
    }

    #[test]
    fn mode_exponential_frozen_value() {
        // μ = σ = 1: eigenvalues (-1 ± i√3)/2. Constants from the closed form
        // e^{-t/2}[cos(ωt) - sin(ωt)/(2ω)], ω = √3/2, and e^{-t/2} sin(ωt)/ω.
        let e = mode_exponential(1.0, 1.0, 1.0);
        assert!((e[0][0] - 0.126_192_958_277_008_74).abs() < 1e-14, "{}", e[0][0]);
        assert!((e[1][0] - 0.533_507_195_114_693).abs() < 1e-14, "{}", e[1][0]);
        // Against a Taylor series of the 2×2 matrix.
        for (mu, sigma, t) in [(3.0, 1.0, 0.7), (1.0, 1.0, 2.0), (2.0, 1.0, 1.3), (40.0, 30.0, 0.1)] {
            let m = DMatrix::from_row_slice(2, 2, &[-mu, -1.0, sigma, 0.0]) * t;
            let mut term = DMatrix::<f64>::identity(2, 2);
            let mut sum = term.clone();
            for k in 1..200 {
                term = &term * &m / k as f64;
                sum += &term;
            }
            let e = mode_exponential(mu, sigma, t);
            for r in 0..2 {
                for c in 0..2 {
                    assert!((e[r][c] - sum[(r, c)]).abs() < 1e-12 * sum.norm().max(1.0));
                }
            }
        }
    }

    #[test]
    fn mode_energy_nonincreasing() {
        let mut rng = SeededRng::new(4);
        for _ in 0..20 {
            let k = vec![(rng.next_u64() % 5) as i64 + 1, (rng.next_u64() % 5) as i64];
            let init = ModeSolution {
                k: k.clone(),
                solenoidal_amp: vec![Complex::new(rng.normal(), rng.normal())],
                potential_pair: [Complex::new(rng.normal(), rng.normal()), Complex::new(rng.normal(), rng.normal())],
            };
            let (_, s) = periodic_symbols(&k, 32);
            let sigma: f64 = s.iter().map(|x| x * x).sum();
            let energy = |m: &ModeSolution| sigma * m.potential_pair[0].norm_sqr() + m.potential_pair[1].norm_sqr();
            let mut prev = energy(&init);
            for i in 1..=40 {
                let e = energy(&periodic_mode_solution(&init, 32, 0.05 * i as f64).unwrap());
                assert!(e <= prev * (1.0 + 1e-12), "{k:?} {i} {e} {prev}");
                prev = e;
            }
        }
        let zero = ModeSolution {
            k: vec![1, 0],
            solenoidal_amp: vec![Complex::new(0.0, 0.0)],
            potential_pair: [Complex::new(0.0, 0.0); 2],
        };
        assert_eq!(periodic_mode_solution(&zero, 16, 3.0).unwrap(), zero);
        let mean = ModeSolution { k: vec![0, 0], ..zero };
        assert!(periodic_mode_solution(&mean, 16, 1.0).is_err());
    }

    #[test]
    fn residual_check_contract() {
        let g = Grid::new(2, 8).unwrap();
        let d = MediumMatrix::diagonal(&[1.0, 2.0]).unwrap();
        let params = NonlinearityParams::quintic();
        let zero = SimState::zero(g);
        let gz = VectorField::zeros(g);
        for sys in [ResidualSystem::Full, ResidualSystem::Truncated, ResidualSystem::Linear] {
            assert_eq!(residual_check(&zero, &gz, &d, &params, sys).unwrap(), 0.0);
        }
        let mut rng = SeededRng::new(8);
        let p = project_mean_zero(&rng.scalar_field(g, 1.0));
        let gt = rng.vector_field(g, 2.0);
        let cfg = SolverConfig::default();
        let u = solve_elliptic_u(&p, &gt, &params, None, &cfg).unwrap();
        let s = SimState::new(u, p.clone(), 0.0).unwrap();
        assert!(residual_check(&s, &gt, &d, &params, ResidualSystem::Truncated).unwrap() <= cfg.newton_tol);
        let junk = SimState::new(rng.vector_field(g, 1.0), p, 0.0).unwrap();
        for sys in [ResidualSystem::Full, ResidualSystem::Truncated, ResidualSystem::Linear] {
            assert!(residual_check(&junk, &gt, &d, &params, sys).unwrap() > 1e-3);
        }
    }
}
