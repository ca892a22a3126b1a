mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use common::{dense_objective, random_blt_gain, random_problem, rng, sample_disturbance, RandomOptions};
use slscs::config::RunConfig;
use slscs::conic::project_psd;
use slscs::linalg::{min_eigenvalue, sorted_eigen};
use slscs::problem::{detransform, f_col_terms, f_row_terms, lmi_block, objective_f, terminal_covariance, transform};
use slscs::sim::{analytic_stats, deviation_norms};
use slscs::sls::{check_parametrization, gain_from_responses, responses_from_gain, RealizationState, ResponsePair};
use slscs::topology::{locality_mask, random_spanning_tree, Direction, SystemGraph};

fn random_directed(seed: u64, nv: usize) -> SystemGraph {
    let mut r = rng(seed);
    let edges: Vec<_> = (0..nv * 2).map(|_| (r.random_range(0..nv), r.random_range(0..nv))).collect();
    SystemGraph::new(nv, edges).unwrap()
}

fn random_pair(seed: u64, opts: &RandomOptions) -> (slscs::problem::CsProblem, ResponsePair) {
    let mut r = rng(seed);
    let cp = random_problem(&mut r, opts);
    let gain = random_blt_gain(&mut r, &cp.dynamics, 0.3);
    let p = responses_from_gain(&cp.dynamics, &gain).unwrap();
    (cp, p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neighborhoods_contain_self_and_are_dual(seed in any::<u64>(), nv in 1usize..7, d in 0usize..4) {
        let g = random_directed(seed, nv);
        for i in 0..nv {
            let out = g.d_neighbors(i, d, Direction::Out).unwrap();
            let inc = g.d_neighbors(i, d, Direction::In).unwrap();
            prop_assert!(out.contains(&i) && inc.contains(&i));
            for j in 0..nv {
                let back = g.d_neighbors(j, d, Direction::In).unwrap();
                prop_assert_eq!(out.contains(&j), back.contains(&i));
            }
        }
    }

    #[test]
    fn locality_mask_grows_with_radius(seed in any::<u64>(), nv in 1usize..5, d in 0usize..3) {
        let g = random_directed(seed, nv);
        let dims: Vec<(usize, usize)> = (0..nv).map(|i| (1 + i % 2, 1)).collect();
        let small = locality_mask(&g, d, &dims, 2);
        let big = locality_mask(&g, d + 1, &dims, 2);
        prop_assert!(small.support_x.is_subset_of(&big.support_x));
        prop_assert!(small.support_u.is_subset_of(&big.support_u));
    }

    #[test]
    fn spanning_trees_connect_the_grid(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5) {
        let g = random_spanning_tree(rows, cols, seed).unwrap();
        prop_assert!(g.is_strongly_connected());
        prop_assert_eq!(g.undirected_pairs().len(), rows * cols - 1);
    }

    #[test]
    fn causal_gains_give_valid_responses(seed in any::<u64>()) {
        let (cp, p) = random_pair(seed, &RandomOptions::default());
        prop_assert!(check_parametrization(&cp.dynamics, &p).unwrap() <= 1e-10);
        prop_assert!(p.diagonal_identity_error() == 0.0);
        prop_assert!(p.blt_violation() == 0.0);
    }

    #[test]
    fn realization_recovers_disturbances(seed in any::<u64>()) {
        let (cp, p) = random_pair(seed, &RandomOptions::default());
        let mut r = rng(seed ^ 0x5eed);
        let w = sample_disturbance(&mut r, &cp);
        let n = cp.n();
        let mut x = w.rows(0, n).into_owned();
        let mut rs = RealizationState::new();
        for t in 0..cp.horizon() {
            let u = rs.realize_step(&p, &x).unwrap();
            x = cp.network.step(t, &x, &u, &w.rows((t + 1) * n, n).into_owned());
        }
        for (t, est) in rs.estimates().iter().enumerate() {
            prop_assert!((est - w.rows(t * n, n)).amax() <= 1e-9);
        }
    }

    #[test]
    fn objective_forms_agree(seed in any::<u64>()) {
        let (cp, p) = random_pair(seed, &RandomOptions::default());
        let f = objective_f(&p, &cp.cost, &cp.noise);
        let scale = 1.0 + f.abs();
        prop_assert!((cp.objective(&p) - f).abs() <= 1e-10 * scale);
        prop_assert!((dense_objective(&cp, &p) - f).abs() <= 1e-10 * scale);
    }

    #[test]
    fn row_terms_sum_to_objective(seed in any::<u64>()) {
        let (cp, p) = random_pair(seed, &RandomOptions::default());
        let f = objective_f(&p, &cp.cost, &cp.noise);
        let rows: f64 = f_row_terms(&p, &cp.cost, &cp.noise, &cp.partitions).unwrap().iter().sum();
        prop_assert!((rows - f).abs() <= 1e-9 * (1.0 + f.abs()));
    }

    #[test]
    fn column_terms_sum_to_objective(seed in any::<u64>()) {
        let opts = RandomOptions { diagonal_theta: true, ..RandomOptions::default() };
        let (cp, p) = random_pair(seed, &opts);
        let f = objective_f(&p, &cp.cost, &cp.noise);
        let cols: f64 = f_col_terms(&p, &cp.cost, &cp.noise, &cp.partitions).unwrap().iter().sum();
        prop_assert!((cols - f).abs() <= 1e-9 * (1.0 + f.abs()));
    }

    #[test]
    fn schur_block_matches_covariance_gap(seed in any::<u64>(), scale in 0.01f64..10.0) {
        let (mut cp, p) = random_pair(seed, &RandomOptions::default());
        cp.terminal.sigma_f *= scale;
        let tol = 1e-9;
        let tol2 = tol * (1.0 + cp.noise.sigma_w().norm());
        let lmi = min_eigenvalue(&lmi_block(&p, &cp.noise, &cp.terminal));
        let gap = min_eigenvalue(&(&cp.terminal.sigma_f - terminal_covariance(&p, &cp.noise)));
        // both signs agree away from the boundary
        if lmi.abs() > tol && gap.abs() > tol2 {
            prop_assert_eq!(lmi >= -tol, gap >= -tol2);
        }
    }

    #[test]
    fn theta_minus_sigma_w_has_rank_one(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cp = random_problem(&mut r, &RandomOptions::default());
        let diff = cp.theta() - cp.noise.sigma_w();
        let (vals, _) = sorted_eigen(&diff);
        let norm = cp.theta().norm().max(1.0);
        if vals.len() > 1 {
            prop_assert!(vals[1].abs() <= 1e-8 * norm);
        }
    }

    #[test]
    fn transform_round_trips_responses(seed in any::<u64>()) {
        let (cp, p) = random_pair(seed, &RandomOptions::default());
        let tp = transform(&cp);
        prop_assert!(tp.reconstruction_error(&cp.theta()) <= 1e-9 * cp.theta().norm().max(1.0));
        let back = detransform(&(&p.phi_x * &tp.v), &(&p.phi_u * &tp.v), &tp.v, cp.n(), cp.m(), cp.horizon()).unwrap();
        prop_assert!((&back.phi_x - &p.phi_x).amax() <= 1e-10);
        prop_assert!((&back.phi_u - &p.phi_u).amax() <= 1e-10);
        prop_assert!((objective_f(&back, &cp.cost, &cp.noise) - objective_f(&p, &cp.cost, &cp.noise)).abs()
            <= 1e-9 * (1.0 + objective_f(&p, &cp.cost, &cp.noise).abs()));
        let kp = gain_from_responses(&p).unwrap();
        let kb = gain_from_responses(&back).unwrap();
        prop_assert!((kp.k - kb.k).amax() <= 1e-8);
    }

    #[test]
    fn deviation_norms_are_ordered(seed in any::<u64>()) {
        let (cp, p) = random_pair(seed, &RandomOptions::default());
        let stats = analytic_stats(&p, &cp).unwrap();
        for t in 0..=cp.horizon() {
            let d = deviation_norms(&cp.terminal.sigma_f, &stats.cov_traj[t]).unwrap();
            prop_assert!(d.spectral <= d.frobenius * (1.0 + 1e-12));
            prop_assert!(d.frobenius <= d.nuclear * (1.0 + 1e-12));
        }
    }

    #[test]
    fn psd_projection_is_psd(seed in any::<u64>(), size in 1usize..8) {
        let mut r = rng(seed);
        let a = DMatrix::from_fn(size, size, |_, _| r.random_range(-5.0..5.0));
        prop_assert!(min_eigenvalue(&project_psd(&a)) >= -1e-10);
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), rows in 1usize..8, horizon in 1usize..20, rho in 1e-4f64..10.0, shift in 0.0f64..2.0) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.instance.rows = rows;
        cfg.instance.horizon = horizon;
        cfg.admm.rho = rho;
        cfg.terminal.shift = shift;
        let text = cfg.to_toml_string().unwrap();
        prop_assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }
}

#[test]
fn realized_closed_loop_matches_responses() {
    let mut r = rng(11);
    for _ in 0..20 {
        let cp = random_problem(&mut r, &RandomOptions::default());
        let gain = random_blt_gain(&mut r, &cp.dynamics, 0.3);
        let p = responses_from_gain(&cp.dynamics, &gain).unwrap();
        let w = sample_disturbance(&mut r, &cp);
        let (n, m) = (cp.n(), cp.m());
        let xs = &p.phi_x * &w;
        let us = &p.phi_u * &w;
        let mut x = w.rows(0, n).into_owned();
        let mut rs = RealizationState::new();
        for t in 0..cp.horizon() {
            assert!((&x - xs.rows(t * n, n)).amax() <= 1e-9);
            let u: DVector<f64> = rs.realize_step(&p, &x).unwrap();
            assert!((&u - us.rows(t * m, m)).amax() <= 1e-9);
            x = cp.network.step(t, &x, &u, &w.rows((t + 1) * n, n).into_owned());
        }
        assert!((&x - xs.rows(cp.horizon() * n, n)).amax() <= 1e-9);
    }
}
