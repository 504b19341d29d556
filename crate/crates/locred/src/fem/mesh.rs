//! Structured criss-cross triangulation of the unit square.

use crate::{Error, Result};

/// Criss-cross triangulation: `n_squares x n_squares` grid squares, each
/// split into four triangles by its center node.
///
/// Node ordering is fixed for reproducibility: grid vertices row-major
/// (`iy * (n+1) + ix`), then square centers row-major.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub n_squares: usize,
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    /// Containing square `(ix, iy)` of each triangle.
    pub square_of_triangle: Vec<(usize, usize)>,
    pub is_boundary: Vec<bool>,
    /// Free-DOF index of each node, `None` for Dirichlet-constrained nodes.
    pub free_index: Vec<Option<usize>>,
    pub n_free: usize,
}

impl TriMesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Grid pitch `1 / n_squares`.
    pub fn pitch(&self) -> f64 {
        1.0 / self.n_squares as f64
    }

    pub fn vertex_id(&self, ix: usize, iy: usize) -> usize {
        iy * (self.n_squares + 1) + ix
    }

    pub fn center_id(&self, ix: usize, iy: usize) -> usize {
        (self.n_squares + 1) * (self.n_squares + 1) + iy * self.n_squares + ix
    }

    /// Nodes of the free DOFs, in free-index order.
    pub fn free_nodes(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_free];
        for (node, fi) in self.free_index.iter().enumerate() {
            if let Some(f) = fi {
                out[*f] = node;
            }
        }
        out
    }
}

/// Build the criss-cross mesh with `(n+1)^2 + n^2` nodes and `4 n^2`
/// triangles.
pub fn build_mesh(n_squares: usize) -> Result<TriMesh> {
    if n_squares == 0 {
        return Err(Error::Mesh("n_squares must be at least 1".into()));
    }
    let n = n_squares;
    let h = 1.0 / n as f64;
    let n_vertices = (n + 1) * (n + 1);
    let mut nodes = Vec::with_capacity(n_vertices + n * n);
    for iy in 0..=n {
        for ix in 0..=n {
            nodes.push([ix as f64 * h, iy as f64 * h]);
        }
    }
    for iy in 0..n {
        for ix in 0..n {
            nodes.push([(ix as f64 + 0.5) * h, (iy as f64 + 0.5) * h]);
        }
    }

    let mut triangles = Vec::with_capacity(4 * n * n);
    let mut square_of_triangle = Vec::with_capacity(4 * n * n);
    let vid = |ix: usize, iy: usize| iy * (n + 1) + ix;
    let cid = |ix: usize, iy: usize| n_vertices + iy * n + ix;
    for iy in 0..n {
        for ix in 0..n {
            let v00 = vid(ix, iy);
            let v10 = vid(ix + 1, iy);
            let v01 = vid(ix, iy + 1);
            let v11 = vid(ix + 1, iy + 1);
            let c = cid(ix, iy);
            // Four counterclockwise triangles around the center.
            for tri in [[v00, v10, c], [v10, v11, c], [v11, v01, c], [v01, v00, c]] {
                triangles.push(tri);
                square_of_triangle.push((ix, iy));
            }
        }
    }

    let is_boundary: Vec<bool> = nodes
        .iter()
        .map(|p| p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0)
        .collect();
    let mut free_index = vec![None; nodes.len()];
    let mut n_free = 0;
    for (i, b) in is_boundary.iter().enumerate() {
        if !b {
            free_index[i] = Some(n_free);
            n_free += 1;
        }
    }

    Ok(TriMesh {
        n_squares: n,
        nodes,
        triangles,
        square_of_triangle,
        is_boundary,
        free_index,
        n_free,
    })
}
