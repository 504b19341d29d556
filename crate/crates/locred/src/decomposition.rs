//! Overlapping box decomposition of the unit square, partition of unity,
//! and the constants of the a priori convergence theory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fem::{energy_inner, SparseSpdMatrix, TriMesh};
use crate::{Error, Result};

/// One overlapping subdomain: an axis-aligned box and the free DOFs of the
/// mesh nodes strictly inside it (the discrete `H^1_0` of the box).
#[derive(Debug, Clone)]
pub struct Subdomain {
    /// Lower-left corner.
    pub origin: [f64; 2],
    /// Side length.
    pub side: f64,
    /// Free-DOF indices of nodes strictly inside the box, sorted ascending.
    pub interior_dofs: Vec<usize>,
}

impl Subdomain {
    pub fn local_of(&self, global: usize) -> Option<usize> {
        self.interior_dofs.binary_search(&global).ok()
    }
}

/// Overlapping decomposition with box origins on the lattice
/// `{0, step, 2 step, ..., 1 - side}^2`.
#[derive(Debug, Clone)]
pub struct DomainDecomposition {
    pub subdomains: Vec<Subdomain>,
    pub side: f64,
    pub step: f64,
    /// Maximum number of boxes covering any point, with boxes half-open on
    /// their lower-left edges (closed at the domain boundary).
    pub j_cover: usize,
}

impl DomainDecomposition {
    pub fn n_subdomains(&self) -> usize {
        self.subdomains.len()
    }
}

/// Nodal partition of unity weights, one weight vector per subdomain.
#[derive(Debug, Clone)]
pub struct PartitionOfUnity {
    /// `weights[i][node]`, zero outside subdomain `i`.
    pub weights: Vec<Vec<f64>>,
    /// Ramp width (the decomposition step).
    pub ramp_width: f64,
    /// `max_i ||grad rho_i||_inf^2`
    pub max_grad_sq: f64,
    /// `max_i ||rho_i||_inf^2`
    pub max_val_sq: f64,
}

/// Constants of the convergence theory for one configuration.
#[derive(Debug, Clone)]
pub struct TheoryConstants {
    pub c_f: f64,
    pub contrast: f64,
    pub j_cover: usize,
    pub cpu_sq_bound: f64,
    pub n_subdomains: usize,
    /// Contraction factor per enrichment step.
    pub c: f64,
    pub one_minus_c: f64,
}

impl TheoryConstants {
    pub fn compute(
        dd: &DomainDecomposition,
        pu: &PartitionOfUnity,
        c_f: f64,
        contrast: f64,
    ) -> Result<Self> {
        let cpu_sq_bound = cpu_upper_bound(dd.j_cover, c_f, contrast, pu.max_grad_sq, pu.max_val_sq)?;
        let (c, one_minus_c) = rate_bound(cpu_sq_bound, dd.n_subdomains())?;
        Ok(Self {
            c_f,
            contrast,
            j_cover: dd.j_cover,
            cpu_sq_bound,
            n_subdomains: dd.n_subdomains(),
            c,
            one_minus_c,
        })
    }
}

/// Integer number of grid cells represented by `len`, or an error when it
/// does not align with the mesh pitch.
fn cells_of(len: f64, n_squares: usize, what: &str) -> Result<usize> {
    let cells = len * n_squares as f64;
    let rounded = cells.round();
    if rounded < 1.0 || (cells - rounded).abs() > 1e-9 * n_squares as f64 {
        return Err(Error::Decomposition(format!(
            "{what} = {len} is not a positive multiple of the mesh pitch 1/{n_squares}"
        )));
    }
    Ok(rounded as usize)
}

/// Build the overlapping decomposition with subdomains of side `side` at
/// origin spacing `step`.
pub fn build_decomposition(mesh: &TriMesh, side: f64, step: f64) -> Result<DomainDecomposition> {
    let n = mesh.n_squares;
    let side_cells = cells_of(side, n, "subdomain size")?;
    let step_cells = cells_of(step, n, "subdomain step")?;
    if side_cells > n {
        return Err(Error::Decomposition(format!(
            "subdomain size {side} exceeds the unit square"
        )));
    }
    if step_cells > side_cells {
        return Err(Error::Decomposition(format!(
            "step {step} larger than subdomain size {side} leaves gaps"
        )));
    }
    if (n - side_cells) % step_cells != 0 {
        return Err(Error::Decomposition(format!(
            "(1 - size) = {} cells is not a multiple of step = {} cells",
            n - side_cells,
            step_cells
        )));
    }
    let per_axis = (n - side_cells) / step_cells + 1;
    let h = mesh.pitch();

    // All geometry in half-cell integer units: vertex (ix,iy) sits at
    // (2 ix, 2 iy), a center at (2 ix + 1, 2 iy + 1).
    let half_pos: Vec<[i64; 2]> = {
        let mut v = Vec::with_capacity(mesh.n_nodes());
        for iy in 0..=n {
            for ix in 0..=n {
                v.push([2 * ix as i64, 2 * iy as i64]);
            }
        }
        for iy in 0..n {
            for ix in 0..n {
                v.push([2 * ix as i64 + 1, 2 * iy as i64 + 1]);
            }
        }
        v
    };

    let mut subdomains = Vec::with_capacity(per_axis * per_axis);
    let mut covered = vec![false; mesh.n_nodes()];
    for oy in 0..per_axis {
        for ox in 0..per_axis {
            let x0 = (ox * step_cells) as i64 * 2;
            let y0 = (oy * step_cells) as i64 * 2;
            let x1 = x0 + 2 * side_cells as i64;
            let y1 = y0 + 2 * side_cells as i64;
            let mut interior_dofs = Vec::new();
            for (node, p) in half_pos.iter().enumerate() {
                let inside_closed = p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1;
                if inside_closed {
                    covered[node] = true;
                }
                if p[0] > x0 && p[0] < x1 && p[1] > y0 && p[1] < y1 {
                    if let Some(f) = mesh.free_index[node] {
                        interior_dofs.push(f);
                    }
                }
            }
            interior_dofs.sort_unstable();
            subdomains.push(Subdomain {
                origin: [
                    (ox * step_cells) as f64 * h,
                    (oy * step_cells) as f64 * h,
                ],
                side: side_cells as f64 * h,
                interior_dofs,
            });
        }
    }
    if covered.iter().any(|&c| !c) {
        return Err(Error::Decomposition(
            "subdomain boxes do not cover all mesh nodes".into(),
        ));
    }

    // Maximum cover count per axis; boxes are half-open on the lower edge
    // (the box at origin 0 also covers 0), so counts are well defined on
    // shared edges.  The 2D count is the product of the axis counts.
    let origins: Vec<i64> = (0..per_axis).map(|k| (k * step_cells) as i64).collect();
    let covers_1d = |x: i64| -> usize {
        origins
            .iter()
            .filter(|&&o| (o < x || (o == 0 && x == 0)) && x <= o + side_cells as i64)
            .count()
    };
    let mut breakpoints: Vec<i64> = origins
        .iter()
        .flat_map(|&o| [o, o + side_cells as i64])
        .collect();
    breakpoints.push(0);
    breakpoints.sort_unstable();
    breakpoints.dedup();
    let max_1d = breakpoints.iter().map(|&x| covers_1d(x)).max().unwrap_or(0);
    let j_cover = max_1d * max_1d;

    Ok(DomainDecomposition {
        subdomains,
        side: side_cells as f64 * h,
        step: step_cells as f64 * h,
        j_cover,
    })
}

/// Clamped 1D trapezoid ramp: rises over `delta` from the box edge, plateau
/// at 1, falls over `delta`; sides on the domain boundary are clamped to 1.
fn ramp(x: f64, x0: f64, side: f64, delta: f64, clamp_lo: bool, clamp_hi: bool) -> f64 {
    let rise = if clamp_lo { 1.0 } else { (x - x0) / delta };
    let fall = if clamp_hi { 1.0 } else { (x0 + side - x) / delta };
    rise.min(fall).min(1.0).max(0.0)
}

/// Build the tensor-product trapezoid partition of unity over `dd`.
///
/// Fails when the chosen geometry cannot sum to one at every node (the
/// clamped ramps do so for `step = side / 2` and the degenerate single
/// subdomain).
pub fn build_pu(dd: &DomainDecomposition, mesh: &TriMesh) -> Result<PartitionOfUnity> {
    let delta = dd.step;
    // 1/delta^2 from the integer cell counts, so reported gradients are
    // exact (e.g. 200 for size 0.2 / step 0.1, independent of rounding).
    let step_cells = (dd.step * mesh.n_squares as f64).round();
    let inv_delta_sq = (mesh.n_squares as f64 / step_cells).powi(2);
    let mut weights = Vec::with_capacity(dd.n_subdomains());
    let mut max_grad_sq = 0.0f64;
    let eps = 1e-12;
    for sub in &dd.subdomains {
        let [x0, y0] = sub.origin;
        let s = sub.side;
        let clamp = |lo: f64| lo.abs() < eps;
        let (cxl, cxh) = (clamp(x0), clamp(x0 + s - 1.0));
        let (cyl, cyh) = (clamp(y0), clamp(y0 + s - 1.0));
        let mut w = vec![0.0; mesh.n_nodes()];
        for (node, p) in mesh.nodes.iter().enumerate() {
            let tx = ramp(p[0], x0, s, delta, cxl, cxh);
            let ty = ramp(p[1], y0, s, delta, cyl, cyh);
            w[node] = tx * ty;
        }
        let gx = if cxl && cxh { 0.0 } else { inv_delta_sq };
        let gy = if cyl && cyh { 0.0 } else { inv_delta_sq };
        max_grad_sq = max_grad_sq.max(gx + gy);
        weights.push(w);
    }

    // Sum-to-one and range invariants, checked at every node.
    for node in 0..mesh.n_nodes() {
        let mut sum = 0.0;
        for w in &weights {
            let v = w[node];
            if !(-eps..=1.0 + eps).contains(&v) {
                return Err(Error::PartitionOfUnity(format!(
                    "weight {v} out of [0,1] at node {node}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::PartitionOfUnity(format!(
                "weights sum to {sum} at node {node} (size/step geometry not supported)"
            )));
        }
    }

    Ok(PartitionOfUnity {
        weights,
        ramp_width: delta,
        max_grad_sq,
        max_val_sq: 1.0,
    })
}

/// Right-hand side of the partition of unity stability bound
/// `c_pu^2 <= 2 J (c_f (kappa_max/kappa_min) max||grad rho||_inf^2
///            + max||rho||_inf^2)`.
pub fn cpu_upper_bound(
    j_cover: usize,
    c_f: f64,
    contrast: f64,
    max_grad_sq: f64,
    max_val_sq: f64,
) -> Result<f64> {
    if j_cover == 0 || c_f <= 0.0 || contrast <= 0.0 || max_grad_sq < 0.0 || max_val_sq <= 0.0 {
        return Err(Error::Decomposition(
            "cpu_upper_bound requires positive inputs".into(),
        ));
    }
    Ok(2.0 * j_cover as f64 * (c_f * contrast * max_grad_sq + max_val_sq))
}

/// Contraction factor `c = sqrt(1 - 1/(N_D c_pu^2))` and `1 - c`, the
/// latter computed cancellation free as `x / (1 + sqrt(1 - x))`.
pub fn rate_bound(cpu_sq: f64, n_subdomains: usize) -> Result<(f64, f64)> {
    if n_subdomains == 0 {
        return Err(Error::Decomposition("empty decomposition".into()));
    }
    let x = 1.0 / (n_subdomains as f64 * cpu_sq);
    if x > 1.0 {
        return Err(Error::Decomposition(format!(
            "cpu_sq * N_D = {} < 1; contraction factor undefined",
            n_subdomains as f64 * cpu_sq
        )));
    }
    let one_minus_c = x / (1.0 + (1.0 - x).sqrt());
    Ok((1.0 - one_minus_c, one_minus_c))
}

/// Sampled lower bound estimate of `c_pu^2`:
/// `max_phi sum_i ||I_h(rho_i phi)||_a^2 / ||phi||_a^2`
/// over seeded random free-DOF vectors plus any caller supplied vectors
/// (`I_h` is nodal interpolation).  Diagnostic only; the interpolation step
/// makes this approximate.
pub fn cpu_rayleigh_sample(
    pu: &PartitionOfUnity,
    mesh: &TriMesh,
    a: &SparseSpdMatrix,
    extra: &[&[f64]],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 && extra.is_empty() {
        return Err(Error::Decomposition(
            "cpu_rayleigh_sample needs at least one sample".into(),
        ));
    }
    let free_nodes = mesh.free_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    let quotient = |phi: &[f64]| -> Result<f64> {
        let denom = energy_inner(a, phi, phi)?;
        if denom <= 0.0 {
            return Ok(0.0);
        }
        let mut num = 0.0;
        for w in &pu.weights {
            let cut: Vec<f64> = phi
                .iter()
                .enumerate()
                .map(|(f, &v)| v * w[free_nodes[f]])
                .collect();
            num += energy_inner(a, &cut, &cut)?;
        }
        Ok(num / denom)
    };
    for phi in extra {
        best = best.max(quotient(phi)?);
    }
    for _ in 0..samples {
        let phi: Vec<f64> = (0..mesh.n_free).map(|_| rng.gen_range(-1.0..1.0)).collect();
        best = best.max(quotient(&phi)?);
    }
    Ok(best)
}
