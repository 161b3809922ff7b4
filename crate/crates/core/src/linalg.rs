//! Matrix-free conjugate gradients and a few dense helpers.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{axpy, dot, scalar_laplacian, Grid, SineBasis, VectorField};

#[derive(Debug, Clone, Copy)]
pub struct CgOptions {
    /// Relative residual target `‖b - Ax‖ / ‖b‖`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 20_000 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `A x = b` for a symmetric positive definite `A` given as a closure
/// `apply(x, out)`. `x` holds the initial guess on entry.
pub fn conjugate_gradient<F>(apply: F, b: &[f64], x: &mut [f64], opts: CgOptions) -> Result<CgStats>
where
    F: Fn(&[f64], &mut [f64]),
{
    preconditioned_cg(apply, |r: &[f64], z: &mut [f64]| z.copy_from_slice(r), b, x, opts)
}

/// Conjugate gradients with a symmetric positive definite preconditioner
/// `precond(r, z)` approximating `z = A⁻¹ r`. Convergence is declared on the
/// true (unpreconditioned) relative residual.
pub fn preconditioned_cg<F, P>(
    apply: F,
    precond: P,
    b: &[f64],
    x: &mut [f64],
    opts: CgOptions,
) -> Result<CgStats>
where
    F: Fn(&[f64], &mut [f64]),
    P: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgStats { iterations: 0, residual: 0.0 });
    }
    let target = opts.tol * b_norm;
    let mut ax = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let mut iterations = 0;
    // Outer loop restarts from the true residual whenever the recursive
    // residual claims convergence but the true one disagrees.
    for _restart in 0..8 {
        apply(x, &mut ax);
        for ((ri, bi), ai) in r.iter_mut().zip(b).zip(&ax) {
            *ri = bi - ai;
        }
        let res = dot(&r, &r).sqrt();
        if res <= target {
            return Ok(CgStats { iterations, residual: res / b_norm });
        }
        precond(&r, &mut z);
        p.copy_from_slice(&z);
        let mut rz = dot(&r, &z);
        loop {
            if iterations >= opts.max_iter {
                return Err(Error::CgNotConverged {
                    iterations,
                    residual: dot(&r, &r).sqrt() / b_norm,
                });
            }
            iterations += 1;
            apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= 0.0 || !pap.is_finite() {
                return Err(Error::CgNotConverged {
                    iterations,
                    residual: dot(&r, &r).sqrt() / b_norm,
                });
            }
            let alpha = rz / pap;
            axpy(x, alpha, &p);
            axpy(&mut r, -alpha, &ap);
            if dot(&r, &r).sqrt() <= 0.5 * target {
                break;
            }
            precond(&r, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            for (pi, zi) in p.iter_mut().zip(&z) {
                *pi = zi + beta * *pi;
            }
            rz = rz_new;
        }
    }
    apply(x, &mut ax);
    let res: f64 = b.iter().zip(&ax).map(|(bi, ai)| (bi - ai) * (bi - ai)).sum::<f64>().sqrt();
    if res <= target {
        Ok(CgStats { iterations, residual: res / b_norm })
    } else {
        Err(Error::CgNotConverged { iterations, residual: res / b_norm })
    }
}

/// Exact inverse of the Dirichlet `-Δ` through the sine basis. Used as the
/// preconditioner of every Laplacian-dominated CG solve.
#[derive(Debug, Clone)]
pub struct DirichletPoisson {
    basis: SineBasis,
}

impl DirichletPoisson {
    pub fn new(grid: Grid) -> Self {
        Self { basis: SineBasis::new(grid) }
    }

    pub fn grid(&self) -> &Grid {
        self.basis.grid()
    }

    /// `out = (-Δ)⁻¹ rhs` for one scalar array (or each `n^d` block of a
    /// component-major vector array).
    pub fn apply_inverse(&self, rhs: &[f64], out: &mut [f64]) {
        let n = self.basis.grid().len();
        for (src, dst) in rhs.chunks(n).zip(out.chunks_mut(n)) {
            let mut c = self.basis.forward(src);
            for (ci, li) in c.iter_mut().zip(self.basis.eigenvalues()) {
                *ci /= li;
            }
            dst.copy_from_slice(&self.basis.inverse(&c));
        }
    }

    /// Solves `-Δ u = rhs` componentwise by preconditioned CG.
    pub fn solve(&self, rhs: &VectorField, opts: CgOptions) -> Result<VectorField> {
        let grid = *rhs.grid();
        let n = grid.len();
        let mut x = vec![0.0; rhs.values().len()];
        preconditioned_cg(
            |v, out| {
                for (src, dst) in v.chunks(n).zip(out.chunks_mut(n)) {
                    scalar_laplacian(&grid, src, dst);
                    dst.iter_mut().for_each(|d| *d = -*d);
                }
            },
            |r, z| self.apply_inverse(r, z),
            rhs.values(),
            &mut x,
            opts,
        )?;
        VectorField::from_values(grid, x)
    }
}

/// Householder basis of the mean-zero subspace of `ℝ^N`.
///
/// The reflector `H = I - 2 w wᵀ / wᵀw` with `w = 1/√N - e_{N-1}` maps the
/// normalized constant vector onto the last unit vector, so the first `N - 1`
/// columns of `H` are an orthonormal basis of `{x : Σ x = 0}`.
#[derive(Debug, Clone)]
pub struct MeanZeroBasis {
    n: usize,
    w: Vec<f64>,
    ww: f64,
}

impl MeanZeroBasis {
    pub fn new(n: usize) -> Self {
        let c = 1.0 / (n as f64).sqrt();
        let mut w = vec![c; n];
        w[n - 1] -= 1.0;
        let ww = dot(&w, &w);
        Self { n, w, ww }
    }

    /// Full dimension `N`.
    pub fn full_len(&self) -> usize {
        self.n
    }

    /// Reduced dimension `N - 1`.
    pub fn reduced_len(&self) -> usize {
        self.n - 1
    }

    fn reflect(&self, x: &mut [f64]) {
        let s = 2.0 * dot(&self.w, x) / self.ww;
        axpy(x, -s, &self.w);
    }

    /// Full vector `Q y` from reduced coordinates.
    pub fn lift(&self, y: &[f64]) -> Vec<f64> {
        let mut x = y.to_vec();
        x.push(0.0);
        self.reflect(&mut x);
        x
    }

    /// Reduced coordinates `Qᵀ x` (the mean component is discarded).
    pub fn restrict(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.reflect(&mut y);
        y.truncate(self.n - 1);
        y
    }

    /// Dense `N × (N-1)` basis matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(self.n, self.n - 1);
        let mut e = vec![0.0; self.n - 1];
        for j in 0..self.n - 1 {
            e[j] = 1.0;
            let col = self.lift(&e);
            e[j] = 0.0;
            q.set_column(j, &nalgebra::DVector::from_vec(col));
        }
        q
    }
}

/// Frobenius-norm symmetry defect `‖A - Aᵀ‖ / ‖A‖`.
pub fn symmetry_defect(a: &DMatrix<f64>) -> f64 {
    let norm = a.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (a - a.transpose()).norm() / norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cg_solves_small_spd_system() {
        let a = [[4.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]];
        let b = [1.0, 2.0, 3.0];
        let mut x = vec![0.0; 3];
        let stats = conjugate_gradient(
            |v, out| {
                for i in 0..3 {
                    out[i] = (0..3).map(|j| a[i][j] * v[j]).sum();
                }
            },
            &b,
            &mut x,
            CgOptions { tol: 1e-14, max_iter: 50 },
        )
        .unwrap();
        assert!(stats.iterations <= 4);
        for i in 0..3 {
            let ax: f64 = (0..3).map(|j| a[i][j] * x[j]).sum();
            assert!((ax - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_reports_non_convergence() {
        let b = [1.0, 1.0];
        let mut x = vec![0.0; 2];
        let err = conjugate_gradient(
            |v, out| {
                out[0] = v[0];
                out[1] = 1e-6 * v[1] + 0.5 * v[0];
            },
            &b,
            &mut x,
            CgOptions { tol: 1e-15, max_iter: 1 },
        );
        assert!(matches!(err, Err(Error::CgNotConverged { .. })));
    }

    #[test]
    fn mean_zero_basis_is_orthonormal() {
        let basis = MeanZeroBasis::new(7);
        let q = basis.matrix();
        let qtq = q.transpose() * &q;
        assert!((qtq - DMatrix::identity(6, 6)).norm() < 1e-14);
        for j in 0..6 {
            assert!(q.column(j).sum().abs() < 1e-14);
        }
        let y: Vec<f64> = (0..6).map(|i| i as f64 - 1.3).collect();
        let back = basis.restrict(&basis.lift(&y));
        for (a, b) in y.iter().zip(&back) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
