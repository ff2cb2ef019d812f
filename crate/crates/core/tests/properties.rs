//! Structural invariants over randomly generated instances.
#![allow(clippy::needless_range_loop, clippy::type_complexity)]

mod common;

use common::*;
use mfrbsde::bsde::{martingale_residual, solve_bsde};
use mfrbsde::drivers::{library, ObstacleSpec, TerminalSpec};
use mfrbsde::error::Error;
use mfrbsde::meanfield::{picard_map, picard_solve, theta_gap, MeanFieldParams};
use mfrbsde::oracle::exact_tree_solve;
use mfrbsde::reflected::{flat_off_residual, solve_reflected};
use proptest::prelude::*;
use rand::Rng;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 48, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn martingale_representation_holds(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (steps, marks) = (rng.gen_range(1..=7), rng.gen_range(1..=3));
        let lat = random_lattice(&mut rng, steps, marks);
        let f = random_driver(&mut rng, &lat);
        let laws = laws_for(&mut rng, &f, steps);
        let xi = random_terminal(&mut rng, steps, marks);
        match solve_bsde(&lat, &f, &xi, laws.as_deref()) {
            Ok(sol) => prop_assert!(martingale_residual(&lat, &sol) <= 1e-12),
            Err(Error::NonFiniteDriver { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn reflected_solution_is_a_skorokhod_triple(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (steps, marks) = (rng.gen_range(1..=7), rng.gen_range(1..=2));
        let lat = random_lattice(&mut rng, steps, marks);
        let f = random_lipschitz(&mut rng, &lat, false);
        let laws = laws_for(&mut rng, &f, steps);
        let xi = random_terminal(&mut rng, steps, marks);
        let h = random_obstacle(&mut rng, &lat, &xi.values(&lat));
        let sol = solve_reflected(&lat, &f, &h, &xi, laws.as_deref()).unwrap();
        for s in 0..=steps {
            for (i, node) in lat.nodes(s).iter().enumerate() {
                prop_assert!(sol.base.y[s][i] >= h[s][i]);
                prop_assert!(sol.dk[s][i] >= 0.0);
                for &c in &node.children {
                    prop_assert!(sol.k[s + 1][c] >= sol.k[s][i]);
                }
            }
        }
        prop_assert_eq!(flat_off_residual(&lat, &sol, &h), 0.0);
        prop_assert!(martingale_residual(&lat, &sol.base) <= 1e-12);
    }

    #[test]
    fn absent_barrier_changes_nothing(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (steps, marks) = (rng.gen_range(1..=6), rng.gen_range(1..=2));
        let lat = random_lattice(&mut rng, steps, marks);
        let f = random_lipschitz(&mut rng, &lat, false);
        let laws = laws_for(&mut rng, &f, steps);
        let xi = random_terminal(&mut rng, steps, marks);
        let mut h = lat.zeros();
        h.iter_mut().flatten().for_each(|v| *v = f64::NEG_INFINITY);
        let plain = solve_bsde(&lat, &f, &xi, laws.as_deref()).unwrap();
        let refl = solve_reflected(&lat, &f, &h, &xi, laws.as_deref()).unwrap();
        prop_assert_eq!(&plain.y, &refl.base.y);
        prop_assert!(refl.k.iter().flatten().all(|k| *k == 0.0));
    }

    #[test]
    fn comparison_for_monotone_drivers(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (steps, marks) = (rng.gen_range(1..=6), rng.gen_range(1..=2));
        let lat = random_lattice(&mut rng, steps, marks);
        let f = random_lipschitz(&mut rng, &lat, true);
        let laws = laws_for(&mut rng, &f, steps);
        let xi2 = random_terminal(&mut rng, steps, marks);
        let xi1 = dominating_terminal(&mut rng, xi2.clone(), steps, marks);
        let y1 = solve_bsde(&lat, &f, &xi1, laws.as_deref()).unwrap().y;
        let y2 = solve_bsde(&lat, &f, &xi2, laws.as_deref()).unwrap().y;
        for (a, b) in y1.iter().flatten().zip(y2.iter().flatten()) {
            prop_assert!(a - b >= -1e-12, "{a} < {b}");
        }
    }

    #[test]
    fn solver_agrees_with_tree_oracle(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (steps, marks) = (rng.gen_range(1..=6), rng.gen_range(1..=2));
        let lat = random_lattice(&mut rng, steps, marks);
        let f = random_lipschitz(&mut rng, &lat, false);
        let laws = laws_for(&mut rng, &f, steps);
        let xi = random_terminal(&mut rng, steps, marks);
        let h = random_obstacle(&mut rng, &lat, &xi.values(&lat));
        let sol = solve_reflected(&lat, &f, &h, &xi, laws.as_deref()).unwrap();
        let exact = exact_tree_solve(&lat, &f, Some(&h), &xi, laws.as_deref()).unwrap();
        prop_assert!(max_abs_diff(&sol.base.y, &exact) <= 1e-12);
    }

    #[test]
    fn theta_gap_identities(
        y1 in prop::collection::vec(-1e3f64..1e3, 1..20),
        y2 in prop::collection::vec(-1e3f64..1e3, 1..20),
        theta in 0.01f64..0.99,
    ) {
        let n = y1.len().min(y2.len());
        let (a, b) = (vec![y1[..n].to_vec()], vec![y2[..n].to_vec()]);
        let (d, dt, bar) = theta_gap(&a, &b, theta).unwrap();
        for j in 0..n {
            let scale = 1e-12 * (1.0 + y1[j].abs() + y2[j].abs()) / (1.0 - theta);
            // Y1 - Y2 = (1 - theta)(dY - Y2) and symmetrically with dY~
            prop_assert!((y1[j] - y2[j] - (1.0 - theta) * (d[0][j] - y2[j])).abs() <= scale);
            prop_assert!((y2[j] - y1[j] - (1.0 - theta) * (dt[0][j] - y1[j])).abs() <= scale);
            prop_assert_eq!(bar[0][j], d[0][j].abs() + dt[0][j].abs());
        }
    }

    #[test]
    fn picard_limit_is_a_fixed_point(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (steps, marks) = (rng.gen_range(2..=5), rng.gen_range(1..=2));
        let lat = random_lattice(&mut rng, steps, marks);
        let f = library::linear_mean(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.5..0.5));
        let rb = max_rate(&lat);
        let horizon = lat.grid().horizon();
        let obs = ObstacleSpec::affine(0.1, 0.1, rng.gen_range(-0.2..0.6), -(0.7 + 0.3 * rb) / horizon);
        let xi = TerminalSpec::event_count(0.0, 1.0);
        let params = MeanFieldParams { tol: 1e-12, ..MeanFieldParams::from_specs(&f, &obs) };
        let sol = match picard_solve(&lat, &f, &obs, &xi, &params) {
            Ok((sol, _)) => sol,
            // clock increments too coarse for any contraction window
            Err(Error::SplitInfeasible { .. }) => return Err(TestCaseError::reject("no contraction windows")),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let again = picard_map(&lat, &f, &obs, &xi.values(&lat), &sol.base.y).unwrap();
        prop_assert!(max_abs_diff(&again, &sol.base.y) <= 1e-10);
    }
}
