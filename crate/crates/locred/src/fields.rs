//! Deterministic coefficient and source field generators: a background
//! value overpainted by axis-aligned rectangles that must align with the
//! square grid of the mesh.

use crate::fem::{CoefficientField, SourceField, TriMesh};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub background: f64,
    pub rects: Vec<Rect>,
}

impl FieldSpec {
    pub fn constant(value: f64) -> Self {
        Self {
            background: value,
            rects: Vec::new(),
        }
    }

    /// High-contrast conductivity: background 1 with three horizontal
    /// channels of value 1e5 and height 0.04, aligned to the default
    /// 50x50 grid (pitch 0.02).
    pub fn default_kappa() -> Self {
        let channel = |y0: f64| Rect {
            x0: 0.04,
            y0,
            x1: 0.96,
            y1: y0 + 0.04,
            value: 1e5,
        };
        Self {
            background: 1.0,
            rects: vec![channel(0.24), channel(0.48), channel(0.72)],
        }
    }

    /// Source: two square blocks of side 0.1 with values +1e5 and -1e5 on
    /// a zero background, aligned to the default 50x50 grid.
    pub fn default_f() -> Self {
        let block = |x0: f64, value: f64| Rect {
            x0,
            y0: x0,
            x1: x0 + 0.1,
            y1: x0 + 0.1,
            value,
        };
        Self {
            background: 0.0,
            rects: vec![block(0.16, 1e5), block(0.76, -1e5)],
        }
    }
}

/// Snap a coordinate to the cell index it must sit on; errors if it is
/// not a grid line of the `n x n` square grid.
fn grid_index(coord: f64, n: usize, what: &str) -> Result<usize> {
    let scaled = coord * n as f64;
    let idx = scaled.round();
    if (scaled - idx).abs() > 1e-9 * n as f64 || !(0.0..=n as f64).contains(&idx) {
        return Err(Error::Config(format!(
            "{what} coordinate {coord} does not lie on the 1/{n} grid"
        )));
    }
    Ok(idx as usize)
}

/// Per-square values: background everywhere, then each rectangle painted
/// in order (later rectangles win on overlap).
fn rasterize(spec: &FieldSpec, mesh: &TriMesh) -> Result<Vec<f64>> {
    let n = mesh.n_squares;
    let mut values = vec![spec.background; n * n];
    for (k, r) in spec.rects.iter().enumerate() {
        let ix0 = grid_index(r.x0, n, "rect x0")?;
        let ix1 = grid_index(r.x1, n, "rect x1")?;
        let iy0 = grid_index(r.y0, n, "rect y0")?;
        let iy1 = grid_index(r.y1, n, "rect y1")?;
        if ix0 >= ix1 || iy0 >= iy1 {
            return Err(Error::Config(format!(
                "rectangle {k} is empty or inverted ({}, {}) x ({}, {})",
                r.x0, r.x1, r.y0, r.y1
            )));
        }
        for iy in iy0..iy1 {
            for ix in ix0..ix1 {
                values[iy * n + ix] = r.value;
            }
        }
    }
    Ok(values)
}

pub fn generate_kappa(spec: &FieldSpec, mesh: &TriMesh) -> Result<CoefficientField> {
    CoefficientField::new(rasterize(spec, mesh)?)
}

pub fn generate_f(spec: &FieldSpec, mesh: &TriMesh) -> Result<SourceField> {
    SourceField::new(rasterize(spec, mesh)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::build_mesh;

    #[test]
    fn empty_rect_list_gives_constant_field() {
        let mesh = build_mesh(10).unwrap();
        let k = generate_kappa(&FieldSpec::constant(3.0), &mesh).unwrap();
        assert!(k.values.iter().all(|&v| v == 3.0));
        assert_eq!(k.contrast(), 1.0);
    }

    #[test]
    fn full_domain_rect_overrides_background() {
        let mesh = build_mesh(8).unwrap();
        let spec = FieldSpec {
            background: 1.0,
            rects: vec![Rect {
                x0: 0.0,
                y0: 0.0,
                x1: 1.0,
                y1: 1.0,
                value: 7.0,
            }],
        };
        let k = generate_kappa(&spec, &mesh).unwrap();
        assert!(k.values.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn default_kappa_has_contrast_1e5() {
        let mesh = build_mesh(50).unwrap();
        let k = generate_kappa(&FieldSpec::default_kappa(), &mesh).unwrap();
        assert_eq!(k.kappa_min, 1.0);
        assert_eq!(k.kappa_max, 1e5);
        assert_eq!(k.contrast(), 1e5);
        // Three channels, each 46 squares wide and 2 squares tall.
        let high = k.values.iter().filter(|&&v| v == 1e5).count();
        assert_eq!(high, 3 * 46 * 2);
    }

    #[test]
    fn default_f_attains_plus_minus_1e5() {
        let mesh = build_mesh(50).unwrap();
        let f = generate_f(&FieldSpec::default_f(), &mesh).unwrap();
        let max = f.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = f.values.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(max, 1e5);
        assert_eq!(min, -1e5);
        // Each block covers 5x5 squares at pitch 0.02.
        assert_eq!(f.values.iter().filter(|&&v| v == 1e5).count(), 25);
        assert_eq!(f.values.iter().filter(|&&v| v == -1e5).count(), 25);
        assert_eq!(f.values.iter().filter(|&&v| v == 0.0).count(), 2500 - 50);
    }

    #[test]
    fn off_grid_rectangle_is_rejected() {
        let mesh = build_mesh(50).unwrap();
        let spec = FieldSpec {
            background: 1.0,
            rects: vec![Rect {
                x0: 0.05, // 2.5 cells at pitch 0.02
                y0: 0.0,
                x1: 0.5,
                y1: 0.5,
                value: 2.0,
            }],
        };
        assert!(generate_kappa(&spec, &mesh).is_err());
    }

    #[test]
    fn inverted_rectangle_is_rejected() {
        let mesh = build_mesh(10).unwrap();
        let spec = FieldSpec {
            background: 1.0,
            rects: vec![Rect {
                x0: 0.5,
                y0: 0.1,
                x1: 0.2,
                y1: 0.4,
                value: 2.0,
            }],
        };
        assert!(generate_kappa(&spec, &mesh).is_err());
    }

    #[test]
    fn later_rectangles_win_on_overlap() {
        let mesh = build_mesh(4).unwrap();
        let spec = FieldSpec {
            background: 1.0,
            rects: vec![
                Rect { x0: 0.0, y0: 0.0, x1: 0.5, y1: 0.5, value: 2.0 },
                Rect { x0: 0.25, y0: 0.25, x1: 0.75, y1: 0.75, value: 3.0 },
            ],
        };
        let k = generate_kappa(&spec, &mesh).unwrap();
        // Square containing (0.3, 0.3) got repainted.
        assert_eq!(k.values[1 * 4 + 1], 3.0);
        assert_eq!(k.values[0], 2.0);
    }
}
