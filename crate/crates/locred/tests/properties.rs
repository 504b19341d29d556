//! Property-based invariants over randomized geometries, fields and
//! vectors.

use proptest::prelude::*;

use locred::config::ExperimentConfig;
use locred::decomposition::{build_decomposition, build_pu};
use locred::fem::{
    assemble_stiffness, build_mesh, energy_inner, energy_norm, CoefficientField,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    // Halved-step overlapping decompositions always produce a valid
    // partition of unity: weights in [0,1], summing to one at every node,
    // with the gradient bound (step/cell arithmetic) exact.
    #[test]
    fn partition_of_unity_sums_to_one(step_cells in 1usize..=4, m in 2usize..=5) {
        let side_cells = 2 * step_cells;
        let n = side_cells + step_cells * (m - 1);
        let mesh = build_mesh(n).unwrap();
        let h = 1.0 / n as f64;
        let dd = build_decomposition(&mesh, side_cells as f64 * h, step_cells as f64 * h).unwrap();
        let pu = build_pu(&dd, &mesh).unwrap();
        prop_assert_eq!(dd.n_subdomains(), m * m);
        for node in 0..mesh.n_nodes() {
            let sum: f64 = pu.weights.iter().map(|w| w[node]).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
        let expected_grad = 2.0 * (n as f64 / step_cells as f64).powi(2);
        prop_assert_eq!(pu.max_grad_sq, expected_grad);
    }

    // The energy inner product satisfies Cauchy-Schwarz for arbitrary
    // positive coefficient fields and vectors.
    #[test]
    fn energy_cauchy_schwarz(
        seedlings in prop::collection::vec(0.1f64..1e4, 16),
        u in prop::collection::vec(-10.0f64..10.0, 25),
        v in prop::collection::vec(-10.0f64..10.0, 25),
    ) {
        let mesh = build_mesh(4).unwrap();
        prop_assert_eq!(mesh.n_free, 25);
        let kappa = CoefficientField::new(seedlings).unwrap();
        let a = assemble_stiffness(&mesh, &kappa).unwrap();
        let lhs = energy_inner(&a, &u, &v).unwrap().abs();
        let rhs = energy_norm(&a, &u).unwrap() * energy_norm(&a, &v).unwrap();
        prop_assert!(lhs <= rhs * (1.0 + 1e-10) + 1e-12);
    }

    // Serialized configurations parse back to the identical value for
    // arbitrary tolerances and iteration caps.
    #[test]
    fn config_serialization_round_trips(
        tol_abs in 0.0f64..1.0,
        tol_rel in prop::option::of(1e-12f64..1e-2),
        max_iter in 1usize..10_000,
        c_f in 0.01f64..2.0,
    ) {
        let cfg = ExperimentConfig {
            tol_abs,
            tol_rel,
            max_iter,
            c_f,
            ..ExperimentConfig::default()
        };
        let parsed = ExperimentConfig::parse(&cfg.serialize()).unwrap();
        prop_assert_eq!(parsed, cfg);
    }
}
