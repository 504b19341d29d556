//! Dense Cholesky factorization for the small local subdomain systems.

use crate::{Error, Result};

use super::{norm2, pcg_floor};

/// Lower-triangular Cholesky factor of a dense SPD (or, with pivot
/// skipping, positive semidefinite) matrix.
///
/// Semidefinite mode replaces numerically zero pivots by an identity row
/// and forces the corresponding solution component to zero, which yields a
/// particular solution of consistent systems.
pub struct DenseCholesky {
    n: usize,
    l: Vec<f64>,
    skipped: Vec<bool>,
}

impl DenseCholesky {
    /// Factor a row-major dense symmetric matrix.
    pub fn factor(a: &[f64], n: usize, semidefinite: bool) -> Result<Self> {
        Self::factor_floor(a, n, semidefinite, 1e-12)
    }

    /// [`Self::factor`] with an explicit relative pivot floor.  Raising it
    /// treats near-null directions as null, which regularizes semidefinite
    /// systems whose small eigenvalues are below the round-off noise of
    /// the assembled matrix.
    pub fn factor_floor(
        a: &[f64],
        n: usize,
        semidefinite: bool,
        floor_rel: f64,
    ) -> Result<Self> {
        assert_eq!(a.len(), n * n);
        let mut l = vec![0.0; n * n];
        let mut skipped = vec![false; n];
        let max_diag = (0..n).map(|i| a[i * n + i]).fold(0.0f64, f64::max);
        let pivot_floor = floor_rel * max_diag.max(f64::MIN_POSITIVE);
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if d <= pivot_floor {
                if !semidefinite && d <= 0.0 {
                    return Err(Error::Solver(format!(
                        "matrix not positive definite (pivot {d:.3e} at {j})"
                    )));
                }
                if semidefinite {
                    skipped[j] = true;
                    l[j * n + j] = 1.0;
                    continue;
                }
            }
            let dj = d.sqrt();
            l[j * n + j] = dj;
            for i in j + 1..n {
                let mut v = a[i * n + j];
                for k in 0..j {
                    v -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = v / dj;
            }
        }
        Ok(Self { n, l, skipped })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// One forward/backward substitution pass.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut z = vec![0.0; n];
        for i in 0..n {
            if self.skipped[i] {
                continue;
            }
            let mut acc = b[i];
            for k in 0..i {
                acc -= self.l[i * n + k] * z[k];
            }
            z[i] = acc / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            if self.skipped[i] {
                z[i] = 0.0;
                continue;
            }
            let mut acc = z[i];
            for k in i + 1..n {
                acc -= self.l[k * n + i] * z[k];
            }
            z[i] = acc / self.l[i * n + i];
        }
        z
    }

    /// Factor solve plus a few refinement passes against the exact
    /// operator, returning the iterate with the smallest true residual.
    /// For a factor computed with a raised pivot floor this projects the
    /// solution onto the numerically resolvable subspace and never chases
    /// the dropped directions (unlike a conjugate gradient fallback).
    pub fn solve_best_effort(
        &self,
        apply_a: impl Fn(&[f64], &mut [f64]),
        b: &[f64],
    ) -> Vec<f64> {
        let n = self.n;
        let mut x = self.solve(b);
        let mut r = vec![0.0; n];
        let mut best = x.clone();
        let mut best_res = f64::INFINITY;
        for _ in 0..4 {
            apply_a(&x, &mut r);
            for i in 0..n {
                r[i] = b[i] - r[i];
            }
            let res = norm2(&r);
            if res < best_res {
                best_res = res;
                best.copy_from_slice(&x);
            } else {
                break;
            }
            let dx = self.solve(&r);
            for i in 0..n {
                x[i] += dx[i];
            }
        }
        best
    }

    /// Solve with iterative refinement against the exact operator until the
    /// true relative residual is below `tol`; falls back to factor
    /// preconditioned conjugate gradients if refinement stalls.
    pub fn solve_refined(
        &self,
        apply_a: impl Fn(&[f64], &mut [f64]),
        b: &[f64],
        tol: f64,
    ) -> Result<Vec<f64>> {
        self.solve_refined_floor(apply_a, b, tol, tol)
    }

    /// [`Self::solve_refined`] with a separate acceptance floor for
    /// consistent semidefinite systems, which stall at a round-off floor
    /// above any fixed tolerance (see [`pcg_floor`]).
    pub fn solve_refined_floor(
        &self,
        apply_a: impl Fn(&[f64], &mut [f64]),
        b: &[f64],
        tol: f64,
        accept_tol: f64,
    ) -> Result<Vec<f64>> {
        let n = self.n;
        let b_norm = norm2(b);
        if b_norm == 0.0 {
            return Ok(vec![0.0; n]);
        }
        let mut x = self.solve(b);
        let mut r = vec![0.0; n];
        for _ in 0..4 {
            apply_a(&x, &mut r);
            for i in 0..n {
                r[i] = b[i] - r[i];
            }
            if norm2(&r) <= tol * b_norm {
                return Ok(x);
            }
            let dx = self.solve(&r);
            for i in 0..n {
                x[i] += dx[i];
            }
        }
        apply_a(&x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        if norm2(&r) <= tol * b_norm {
            return Ok(x);
        }
        pcg_floor(
            apply_a,
            |r, z| z.copy_from_slice(&self.solve(r)),
            b,
            tol,
            accept_tol,
            10 * n + 100,
        )
    }
}
