mod common;

use aor::recovery::{assemble_system, dot, norm, recover, CgOptions, LinearOperator, Multipliers};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn probe(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn apply<O: LinearOperator>(op: &O, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; op.dim()];
    op.apply(v, &mut out);
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operator_is_symmetric_and_positive_definite(seed in any::<u64>(), n_x in 2usize..40, n_q in 1usize..30) {
        let inst = random_instance(seed, n_x, n_q, 0.2, true);
        let h = random_hyper(seed);
        let sys = assemble_system(&inst.a, &inst.obs, h, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..40 {
            let u = probe(&mut rng, sys.dim());
            let v = probe(&mut rng, sys.dim());
            let lhs = dot(&u, &apply(&sys, &v));
            let rhs = dot(&apply(&sys, &u), &v);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * norm(&u) * norm(&v));
            prop_assert!(dot(&v, &apply(&sys, &v)) > 0.0);
        }
    }

    #[test]
    fn operator_matches_dense_assembly(seed in any::<u64>(), n_x in 2usize..30, n_q in 1usize..20) {
        let inst = random_instance(seed, n_x, n_q, 0.25, true);
        let h = random_hyper(seed);
        let sys = assemble_system(&inst.a, &inst.obs, h, None).unwrap();
        let (m, v) = dense_system(&inst.a, &inst.obs, &h);
        let rhs: Vec<f64> = v.iter().copied().collect();
        prop_assert!(rel_diff(sys.rhs(), &rhs) < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = probe(&mut rng, sys.dim());
        let want: Vec<f64> = (&m * nalgebra::DVector::from_column_slice(&p)).iter().copied().collect();
        prop_assert!(rel_diff(&apply(&sys, &p), &want) < 1e-12);
        let diag: Vec<f64> = (0..sys.dim()).map(|i| m[(i, i)]).collect();
        prop_assert!(rel_diff(&sys.diagonal(), &diag) < 1e-12);
    }

    #[test]
    fn cg_matches_dense_solve(seed in any::<u64>(), n_x in 2usize..120, n_q in 1usize..80, jacobi in any::<bool>()) {
        let inst = random_instance(seed, n_x, n_q, 0.1, seed % 2 == 0);
        let h = random_hyper(seed);
        // Solution error is bounded by condition number times residual.
        let opts = CgOptions { tol: 1e-10, jacobi, ..CgOptions::default() };
        let res = recover(&inst.a, &inst.obs, h, &opts).unwrap();
        prop_assert!(res.converged);
        let oracle = dense_solve(&inst.a, &inst.obs, &h);
        prop_assert!(rel_diff(&res.stacked(), &oracle) <= 1e-6);
    }

    #[test]
    fn solution_is_stationary(seed in any::<u64>(), n_x in 2usize..60, n_q in 1usize..40) {
        let inst = random_instance(seed, n_x, n_q, 0.15, true);
        let h = random_hyper(seed);
        let opts = CgOptions::default();
        let sys = assemble_system(&inst.a, &inst.obs, h, None).unwrap();
        let res = recover(&inst.a, &inst.obs, h, &opts).unwrap();
        let g = objective_gradient(&inst.a, &inst.obs, &h, &res.x, &res.q);
        // The gradient is twice the system residual.
        prop_assert!(norm(&g) <= 2.0 * 10.0 * opts.tol * norm(sys.rhs()));
    }

    #[test]
    fn objective_beats_plug_in(seed in any::<u64>(), n_x in 2usize..60, n_q in 1usize..40) {
        let inst = random_instance(seed, n_x, n_q, 0.15, true);
        let h = random_hyper(seed);
        let res = recover(&inst.a, &inst.obs, h, &CgOptions::default()).unwrap();
        let at_solution = objective_direct(&inst.a, &inst.obs, &h, &res.x, &res.q);
        let x_plug = inst.obs.scatter_x(inst.obs.x0(), inst.a.n_x());
        let q_plug = inst.obs.scatter_q(inst.obs.q0(), inst.a.n_q());
        let at_plug = objective_direct(&inst.a, &inst.obs, &h, &x_plug, &q_plug);
        prop_assert!(at_solution <= at_plug * (1.0 + 1e-12));
        let lib = aor::recovery::objective(&inst.a, &inst.obs, &h, &res.x, &res.q).unwrap();
        prop_assert!((lib - at_solution).abs() <= 1e-9 * at_solution.max(1.0));
    }

    #[test]
    fn multipliers_enter_the_rhs_only(seed in any::<u64>(), n_x in 2usize..30, n_q in 1usize..20) {
        let inst = random_instance(seed, n_x, n_q, 0.2, false);
        let h = random_hyper(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Multipliers {
            lambda_x: (0..n_x).map(|_| rng.random_range(0.0..2.0)).collect(),
            lambda_q: (0..n_q).map(|_| rng.random_range(0.0..2.0)).collect(),
        };
        let sys = assemble_system(&inst.a, &inst.obs, h, Some(&m)).unwrap();
        let base = assemble_system(&inst.a, &inst.obs, h, None).unwrap();
        let lam: Vec<f64> = m.lambda_x.iter().chain(&m.lambda_q).copied().collect();
        for ((r, b), l) in sys.rhs().iter().zip(base.rhs()).zip(&lam) {
            prop_assert!((r - b - l).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_observations_give_zero_solution() {
    let inst = random_instance(3, 10, 6, 0.3, false);
    let empty = aor::recovery::Observations::empty();
    let res = recover(&inst.a, &empty, random_hyper(3), &CgOptions::default()).unwrap();
    assert!(res.x.iter().chain(&res.q).all(|v| *v == 0.0));
}

#[test]
fn tiny_instances_match_dense_solve_tightly() {
    for seed in 0..20 {
        let inst = random_instance(seed, 5 * 4, 3 * 4, 0.3, true);
        let h = random_hyper(seed);
        let opts = CgOptions { tol: 1e-12, ..CgOptions::default() };
        let res = recover(&inst.a, &inst.obs, h, &opts).unwrap();
        assert!(rel_diff(&res.stacked(), &dense_solve(&inst.a, &inst.obs, &h)) <= 1e-8, "seed {seed}");
    }
}

#[test]
fn consistent_observations_are_reproduced_on_observed_rows() {
    use aor::recovery::{Hyperparameters, Observations};
    let inst = random_instance(11, 40, 20, 0.15, false);
    let x_true = inst.a.apply(&inst.q_true).unwrap();
    let rows = inst.obs.link_rows().to_vec();
    let x0: Vec<f64> = rows.iter().map(|&r| x_true[r]).collect();
    let obs = Observations::links_only(rows.clone(), x0).unwrap();
    let h = Hyperparameters { w_x: 1e-6, w_q: 1e-6, w_sx: 1e4, w_sq: 0.0 };
    let res = recover(&inst.a, &obs, h, &CgOptions::default()).unwrap();
    for &r in &rows {
        assert!((res.x[r] - x_true[r]).abs() <= 0.02 * x_true[r], "row {r}");
    }
}
