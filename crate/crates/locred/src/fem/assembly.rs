//! Stiffness and load assembly for P1 elements with piecewise constant
//! coefficients.  Element integrals are closed form, no quadrature error.

use crate::{Error, Result};

use super::{CoefficientField, DofVector, SourceField, SparseSpdMatrix, TriMesh};

/// Assemble `a(u, v) = int kappa grad u . grad v` over the free DOFs,
/// Dirichlet DOFs eliminated.
pub fn assemble_stiffness(mesh: &TriMesh, kappa: &CoefficientField) -> Result<SparseSpdMatrix> {
    let n = mesh.n_squares;
    if kappa.values.len() != n * n {
        return Err(Error::Dimension(format!(
            "coefficient field has {} squares, mesh has {}",
            kappa.values.len(),
            n * n
        )));
    }
    let mut triplets = Vec::with_capacity(9 * mesh.triangles.len());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let (sx, sy) = mesh.square_of_triangle[t];
        let k = kappa.values[sy * n + sx];
        let p: [[f64; 2]; 3] = [mesh.nodes[tri[0]], mesh.nodes[tri[1]], mesh.nodes[tri[2]]];
        let area2 = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
            - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        let area = 0.5 * area2;
        // grad(lambda_i) = rot90(p_{i+2} - p_{i+1}) / (2 area)
        let mut grads = [[0.0; 2]; 3];
        for i in 0..3 {
            let e = [
                p[(i + 2) % 3][0] - p[(i + 1) % 3][0],
                p[(i + 2) % 3][1] - p[(i + 1) % 3][1],
            ];
            grads[i] = [-e[1] / area2, e[0] / area2];
        }
        for i in 0..3 {
            let Some(fi) = mesh.free_index[tri[i]] else {
                continue;
            };
            for j in 0..3 {
                let Some(fj) = mesh.free_index[tri[j]] else {
                    continue;
                };
                let v = k * area * (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1]);
                triplets.push((fi, fj, v));
            }
        }
    }
    Ok(SparseSpdMatrix::from_triplets(mesh.n_free, &triplets))
}

/// Assemble `f(v) = int f v` over the free DOFs; exact for piecewise
/// constant `f` against P1 basis functions (area / 3 per vertex).
pub fn assemble_load(mesh: &TriMesh, f: &SourceField) -> Result<DofVector> {
    let n = mesh.n_squares;
    if f.values.len() != n * n {
        return Err(Error::Dimension(format!(
            "source field has {} squares, mesh has {}",
            f.values.len(),
            n * n
        )));
    }
    let mut b = vec![0.0; mesh.n_free];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let (sx, sy) = mesh.square_of_triangle[t];
        let fv = f.values[sy * n + sx];
        if fv == 0.0 {
            continue;
        }
        let p: [[f64; 2]; 3] = [mesh.nodes[tri[0]], mesh.nodes[tri[1]], mesh.nodes[tri[2]]];
        let area = 0.5
            * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
                - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]));
        for i in 0..3 {
            if let Some(fi) = mesh.free_index[tri[i]] {
                b[fi] += fv * area / 3.0;
            }
        }
    }
    Ok(b)
}
