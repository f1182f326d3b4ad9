//! Property-based invariants over randomized inputs.

use std::sync::Arc;

use halfspace_ma::asymptotics::{apply_affine_rescale, lu_normalize, Evaluator};
use halfspace_ma::linear::{solve_linear_dirichlet, CoefficientField, ExteriorRegion, RegionClass};
use halfspace_ma::ma::{comparison_check, solve_ma_dirichlet};
use halfspace_ma::{HalfGrid, SolverConfig, SourceTerm};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spd(entries: &[f64], n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |i, j| entries[i * n + j]);
    &m * m.transpose() + DMatrix::identity(n, n) * 0.05
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lu_normalize_round_trips(entries in prop::collection::vec(-2.0f64..2.0, 9), three in any::<bool>()) {
        let n = if three { 3 } else { 2 };
        let h = spd(&entries, n);
        let t = lu_normalize(&h).unwrap();
        for i in 0..n {
            prop_assert!(t[(i, i)] > 0.0);
            for j in 0..i {
                prop_assert_eq!(t[(i, j)], 0.0);
            }
        }
        let scale = h.amax().max(1.0);
        prop_assert!((t.transpose() * &t - &h).amax() <= 1e-12 * scale);
    }

    #[test]
    fn annuli_split_without_overlap(a in 0.0f64..2.0, w1 in 0.1f64..2.0, w2 in 0.1f64..2.0) {
        let g = HalfGrid::new(2, 6.0, 6.0, 0.25).unwrap();
        let (b, c) = (a + w1, a + w1 + w2);
        let mut inner = g.annulus_nodes(a, b).unwrap();
        let outer = g.annulus_nodes(b, c).unwrap();
        let whole = g.annulus_nodes(a, c).unwrap();
        prop_assert!(inner.iter().all(|i| !outer.contains(i)));
        inner.extend(outer);
        inner.sort_unstable();
        prop_assert_eq!(inner, whole);
    }

    #[test]
    fn bottom_points_stay_on_the_bottom(q01 in -2.0f64..2.0, d in 0.3f64..3.0, m in 1.0f64..50.0, x1 in -5.0f64..5.0) {
        let q = DMatrix::from_row_slice(2, 2, &[d, q01, 0.0, 1.0 / d]);
        // vanishes exactly on the bottom, positive above it
        let source: Evaluator = Arc::new(|x: &[f64]| x[1] * (1.0 + x[0] * x[0]));
        let scaled = apply_affine_rescale(source, &q, m).unwrap();
        prop_assert_eq!(scaled(&[x1, 0.0]), 0.0);
        prop_assert!(scaled(&[x1, 0.5]) > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn linear_solutions_obey_the_maximum_principle(seed in any::<u64>(), lo in -2.0f64..0.0, hi in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = CoefficientField::random_perturbation(2, 1.0, 0.5, 2.0, &mut rng).unwrap();
        let grid = Arc::new(HalfGrid::new(2, 4.0, 4.0, 0.25).unwrap());
        let region = ExteriorRegion::new(grid, 1.0).unwrap();
        let data = |x: &[f64], class: RegionClass| match class {
            RegionClass::Bottom => lo + (hi - lo) * (0.5 + 0.5 * x[0].sin()),
            RegionClass::Inner => hi,
            _ => lo,
        };
        let u = solve_linear_dirichlet(&region, &coeffs, &data).unwrap();
        let tol = 1e-9 * (hi - lo).max(1.0);
        for i in 0..u.len() {
            prop_assert!(u.get(i) >= lo - tol && u.get(i) <= hi + tol, "node {} value {}", i, u.get(i));
        }
    }

    #[test]
    fn ordered_data_give_ordered_solutions(shift in 0.0f64..1.0, tilt in -0.5f64..0.5, amp in 0.0f64..3.0) {
        let grid = Arc::new(HalfGrid::new(2, 2.0, 2.0, 0.125).unwrap());
        let cfg = SolverConfig::default();
        let base = move |x: &[f64]| 0.5 * (x[0] * x[0] + x[1] * x[1]) + tilt * x[0];
        let raised = move |x: &[f64]| base(x) + shift * x[1];
        // a larger source with lower boundary data gives the smaller solution
        let big = SourceTerm::bump(amp, 0.5).unwrap();
        let low = solve_ma_dirichlet(grid.clone(), &big, &base, &cfg, None).unwrap();
        let high = solve_ma_dirichlet(grid, &SourceTerm::unit(), &raised, &cfg, None).unwrap();
        let rep = comparison_check(&low, &high).unwrap();
        prop_assert!(rep.holds, "{:?}", rep);
    }
}
