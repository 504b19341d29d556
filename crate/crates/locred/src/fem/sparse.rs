//! Compressed sparse row storage for the symmetric positive (semi)definite
//! stiffness operator, plus a preconditioned conjugate gradient solver.

use crate::{Error, Result};

use super::{dot, norm2};

/// Symmetric sparse matrix over free DOFs in CSR form.  Both triangles are
/// stored; columns within a row are sorted.
#[derive(Debug, Clone)]
pub struct SparseSpdMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSpdMatrix {
    /// Assemble from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; n + 1];
        for &(r, _, _) in triplets {
            counts[r + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut entries: Vec<(usize, f64)> = vec![(0, 0.0); triplets.len()];
        let mut fill = counts.clone();
        for &(r, c, v) in triplets {
            entries[fill[r]] = (c, v);
            fill[r] += 1;
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            let row = &mut entries[counts[i]..counts[i + 1]];
            row.sort_unstable_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for &(c, v) in row.iter() {
                if last == Some(c) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    vals.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.col_idx[k] == i {
                    d[i] = self.vals[k];
                }
            }
        }
        d
    }

    /// Largest |A_ij - A_ji| over stored entries.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                let vji = self.entry(j, i);
                worst = worst.max((self.vals[k] - vji).abs());
            }
        }
        worst
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        match row.binary_search(&j) {
            Ok(p) => self.vals[self.row_ptr[i] + p],
            Err(_) => 0.0,
        }
    }

    /// Principal submatrix on the (sorted, ascending) index set `dofs`.
    pub fn submatrix(&self, dofs: &[usize]) -> SparseSpdMatrix {
        let mut local_of = vec![usize::MAX; self.n];
        for (l, &g) in dofs.iter().enumerate() {
            local_of[g] = l;
        }
        let mut triplets = Vec::new();
        for (l, &g) in dofs.iter().enumerate() {
            for k in self.row_ptr[g]..self.row_ptr[g + 1] {
                let lj = local_of[self.col_idx[k]];
                if lj != usize::MAX {
                    triplets.push((l, lj, self.vals[k]));
                }
            }
        }
        SparseSpdMatrix::from_triplets(dofs.len(), &triplets)
    }

    /// Dense row-major copy; only sensible for small systems.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                d[i * self.n + self.col_idx[k]] = self.vals[k];
            }
        }
        d
    }

    /// Solve `A x = b` by conjugate gradients with an IC(0) preconditioner
    /// (Jacobi fallback on breakdown), to relative residual `tol`.
    pub fn solve(&self, b: &[f64], tol: f64) -> Result<Vec<f64>> {
        self.solve_floor(b, tol, tol)
    }

    /// [`Self::solve`] with a separate acceptance floor (see [`pcg_floor`]):
    /// ill-conditioned systems hit a finite-precision true-residual floor
    /// above `tol` that no solver can cross in f64.
    pub fn solve_floor(&self, b: &[f64], tol: f64, accept_tol: f64) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::Dimension(format!(
                "solve: matrix dim {} vs rhs {}",
                self.n,
                b.len()
            )));
        }
        let b_norm = norm2(b);
        if b_norm == 0.0 {
            return Ok(vec![0.0; self.n]);
        }
        let ic = IncompleteCholesky::factor(self);
        let diag = self.diag();
        if diag.iter().any(|&d| d < 0.0) {
            return Err(Error::Solver("matrix has a negative diagonal entry".into()));
        }
        let apply_m = |r: &[f64], z: &mut [f64]| match &ic {
            Some(f) => f.apply(r, z),
            None => {
                for i in 0..r.len() {
                    z[i] = if diag[i] > 0.0 { r[i] / diag[i] } else { r[i] };
                }
            }
        };
        pcg_floor(
            |x, y| self.matvec(x, y),
            apply_m,
            b,
            tol,
            accept_tol,
            50 * self.n + 200,
        )
    }
}

/// Preconditioned conjugate gradients on a matrix-free operator.
///
/// Converges on positive semidefinite consistent systems as well; the
/// accepted solution satisfies `||b - A x|| <= tol * ||b||` on the true
/// (recomputed) residual.
pub fn pcg(
    apply_a: impl Fn(&[f64], &mut [f64]),
    apply_m: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    pcg_floor(apply_a, apply_m, b, tol, tol, max_iter)
}

/// Like [`pcg`], but with a separate acceptance floor: the solve targets
/// `tol` and, when it stalls above it, still accepts the best iterate if
/// its true relative residual is at most `accept_tol`.  Consistent
/// positive semidefinite systems stall at a round-off floor proportional
/// to the magnitude of the data, not of the right-hand side.
pub fn pcg_floor(
    apply_a: impl Fn(&[f64], &mut [f64]),
    apply_m: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    tol: f64,
    accept_tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let n = b.len();
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let target = tol * b_norm;
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    apply_m(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut best_x = x.clone();
    let mut best_res = b_norm;
    // Stop grinding once the recurrence residual stops improving: the
    // attainable accuracy floor of finite precision has been reached.
    let mut rec_best = b_norm;
    let mut stalled = 0usize;
    for _ in 0..max_iter {
        apply_a(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            // Semidefinite direction exhausted; accept only if converged.
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rec_res = norm2(&r);
        if rec_res < 0.999 * rec_best {
            rec_best = rec_res;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled > 300 {
                break;
            }
        }
        if rec_res <= target {
            // Guard against recurrence drift: check the true residual.
            apply_a(&x, &mut ap);
            let mut true_res = 0.0;
            for i in 0..n {
                let d = b[i] - ap[i];
                true_res += d * d;
                r[i] = d;
            }
            let true_res = true_res.sqrt();
            if true_res <= target {
                return Ok(x);
            }
            if true_res < best_res {
                best_res = true_res;
                best_x.copy_from_slice(&x);
            }
        }
        apply_m(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    // Final check covers semidefinite breakdown after convergence.
    let mut ax = vec![0.0; n];
    apply_a(&x, &mut ax);
    let res: f64 = (0..n).map(|i| (b[i] - ax[i]).powi(2)).sum::<f64>().sqrt();
    if res <= target {
        return Ok(x);
    }
    if res < best_res {
        best_res = res;
        best_x.copy_from_slice(&x);
    }
    if best_res <= accept_tol * b_norm {
        return Ok(best_x);
    }
    Err(Error::Solver(format!(
        "conjugate gradients did not reach relative residual {:.1e} (best {:.3e})",
        tol,
        best_res / b_norm
    )))
}

/// Zero fill-in incomplete Cholesky factor on the lower triangle of `A`.
struct IncompleteCholesky {
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl IncompleteCholesky {
    /// Returns `None` on breakdown (nonpositive pivot), which happens for
    /// semidefinite inputs; callers then fall back to Jacobi.
    fn factor(a: &SparseSpdMatrix) -> Option<Self> {
        let n = a.n;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            for k in a.row_ptr[i]..a.row_ptr[i + 1] {
                let j = a.col_idx[k];
                if j > i {
                    break;
                }
                let mut v = a.vals[k];
                if j < i {
                    // Subtract the common-pattern inner product of the
                    // already computed parts of rows i and j.
                    let (mut pi, ei) = (row_ptr[i], col_idx.len());
                    let (mut pj, ej) = (row_ptr[j], row_ptr[j + 1] - 1);
                    while pi < ei && pj < ej {
                        let (ci, cj) = (col_idx[pi], col_idx[pj]);
                        if ci == cj {
                            v -= vals[pi] * vals[pj];
                            pi += 1;
                            pj += 1;
                        } else if ci < cj {
                            pi += 1;
                        } else {
                            pj += 1;
                        }
                    }
                    let dj = vals[row_ptr[j + 1] - 1];
                    col_idx.push(j);
                    vals.push(v / dj);
                } else {
                    for p in row_ptr[i]..col_idx.len() {
                        v -= vals[p] * vals[p];
                    }
                    if v <= 0.0 {
                        return None;
                    }
                    col_idx.push(i);
                    vals.push(v.sqrt());
                }
            }
            row_ptr.push(col_idx.len());
        }
        Some(Self {
            row_ptr,
            col_idx,
            vals,
        })
    }

    /// z = (L L')^{-1} r
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let n = r.len();
        // Forward solve L y = r.
        for i in 0..n {
            let mut acc = r[i];
            let end = self.row_ptr[i + 1] - 1;
            for k in self.row_ptr[i]..end {
                acc -= self.vals[k] * z[self.col_idx[k]];
            }
            z[i] = acc / self.vals[end];
        }
        // Backward solve L' z = y.
        for i in (0..n).rev() {
            let end = self.row_ptr[i + 1] - 1;
            z[i] /= self.vals[end];
            let zi = z[i];
            for k in self.row_ptr[i]..end {
                z[self.col_idx[k]] -= self.vals[k] * zi;
            }
            // Diagonal handled above; the subtraction updates earlier rows.
        }
    }
}
