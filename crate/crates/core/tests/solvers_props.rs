use nalgebra::DMatrix;
use proptest::prelude::*;

use imc_core::linalg::haar_orthogonal;
use imc_core::model::{sample_observations, NoiseSpec, ObservationSet, Sample, SideInfoPair};
use imc_core::rng::{gaussian_matrix, seeded};
use imc_core::solvers::{
    cross_validate_lambda, lagrangian_objective, lambda_from_theory, lambda_max, solve_exact, solve_lagrangian,
    svt, SolverOptions, StepRule,
};
use imc_core::synthlab::generate_synthetic;
use imc_core::ImcError;

fn tight() -> SolverOptions {
    SolverOptions { max_iters: 20_000, tol_rel_obj: 1e-13, tol_feas: 1e-10, ..SolverOptions::default() }
}

fn full_once(target: &DMatrix<f64>) -> ObservationSet {
    let (m, n) = target.shape();
    let samples = (0..m as u32)
        .flat_map(|i| (0..n as u32).map(move |j| (i, j)))
        .map(|(i, j)| Sample { i, j, value: target[(i as usize, j as usize)] })
        .collect();
    ObservationSet::from_samples(m, n, samples).unwrap()
}

fn nuclear_oracle(m: &DMatrix<f64>) -> f64 {
    let g = if m.nrows() < m.ncols() { m * m.transpose() } else { m.transpose() * m };
    let ev = g.symmetric_eigen().eigenvalues;
    let top = ev.iter().fold(0.0f64, |a, l| a.max(*l));
    ev.iter().filter(|l| **l > 1e-13 * top).map(|l| l.sqrt()).sum()
}

/// `(2/N) Xᵀ S Y` with `S_ij = Σ_k (pred_ij - v_k)` over samples at `(i, j)`.
fn gradient_oracle(side: &SideInfoPair, obs: &ObservationSet, m: &DMatrix<f64>) -> DMatrix<f64> {
    let pred = side.embed(m);
    let mut s = DMatrix::zeros(obs.m(), obs.n());
    for smp in obs.samples() {
        let (i, j) = (smp.i as usize, smp.j as usize);
        s[(i, j)] += pred[(i, j)] - smp.value;
    }
    side.x().transpose() * s * side.y() * (2.0 / obs.len() as f64)
}

fn per_sample_objective(side: &SideInfoPair, obs: &ObservationSet, m: &DMatrix<f64>, lambda: f64) -> f64 {
    let pred = side.embed(m);
    let sq: f64 = obs.samples().iter().map(|s| (s.value - pred[(s.i as usize, s.j as usize)]).powi(2)).sum();
    sq / obs.len() as f64 + lambda * nuclear_oracle(m)
}

#[test]
fn svt_examples() {
    let m = gaussian_matrix(&mut seeded(1), 4, 3);
    assert!((svt(&m, 0.0) - &m).norm() < 1e-12);
    let d = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
    assert!((svt(&d, 2.0) - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).norm() < 1e-14);
    assert_eq!(svt(&d, 5.0), DMatrix::zeros(2, 2));
}

#[test]
fn svt_minimises_prox_objective() {
    let mut g = seeded(2);
    for _ in 0..50 {
        let m = gaussian_matrix(&mut g, 5, 4);
        let t = 0.7;
        let w = svt(&m, t);
        let obj = |z: &DMatrix<f64>| 0.5 * (z - &m).norm_squared() + t * nuclear_oracle(z);
        let best = obj(&w);
        for _ in 0..20 {
            let z = &w + gaussian_matrix(&mut g, 5, 4) * 1e-3;
            assert!(obj(&z) >= best - 1e-12);
        }
    }
}

#[test]
fn negative_lambda_is_rejected() {
    let inst = generate_synthetic(6, 6, 1, 2, 2, 1.0, 3).unwrap();
    let obs = sample_observations(&inst, 10, NoiseSpec::None, 4).unwrap();
    let err = solve_lagrangian(&inst.side, &obs, -1.0, &SolverOptions::default()).unwrap_err();
    assert!(matches!(err, ImcError::InvalidArgument(_)));
}

#[test]
fn options_validation_and_serde() {
    assert!(SolverOptions { max_iters: 0, ..SolverOptions::default() }.validate().is_err());
    assert!(SolverOptions { tol_feas: 0.0, ..SolverOptions::default() }.validate().is_err());
    let o: SolverOptions = serde_json::from_str(r#"{"max_iters": 10, "step_rule": "fixed"}"#).unwrap();
    assert_eq!(o.max_iters, 10);
    assert_eq!(o.step_rule, StepRule::Fixed);
    assert_eq!(o.tol_rel_obj, 1e-8);
    assert!(serde_json::from_str::<SolverOptions>(r#"{"max_iter": 10}"#).is_err());
}

#[test]
fn zero_lambda_full_data_recovers_target() {
    let inst = generate_synthetic(12, 10, 2, 5, 4, 5.0, 5).unwrap();
    let obs = full_once(inst.ground_truth());
    let sol = solve_lagrangian(&inst.side, &obs, 0.0, &SolverOptions::default()).unwrap();
    let rel = (&sol.rhat - inst.ground_truth()).norm() / inst.ground_truth().norm();
    assert!(rel <= 1e-6, "rel {rel}");
    assert!((&sol.rhat - inst.side.embed(&sol.mhat)).norm() <= 1e-12 * sol.rhat.norm());
}

#[test]
fn lambda_above_gradient_bound_gives_zero() {
    let inst = generate_synthetic(15, 12, 2, 5, 5, 4.0, 6).unwrap();
    let obs = sample_observations(&inst, 80, NoiseSpec::gaussian(0.1), 7).unwrap();
    let lmax = lambda_max(&inst.side, &obs).unwrap();
    let g0 = gradient_oracle(&inst.side, &obs, &DMatrix::zeros(5, 5));
    let spec0 = (g0.transpose() * &g0).symmetric_eigen().eigenvalues.max().sqrt();
    assert!((lmax - spec0).abs() <= 1e-10 * spec0);
    let sol = solve_lagrangian(&inst.side, &obs, 2.0 * lmax, &SolverOptions::default()).unwrap();
    assert_eq!(sol.mhat, DMatrix::zeros(5, 5));
    let sol = solve_lagrangian(&inst.side, &obs, 0.5 * lmax, &SolverOptions::default()).unwrap();
    assert!(sol.mhat.norm() > 0.0);
}

#[test]
fn single_entry_matches_grid_search() {
    let side = SideInfoPair::new(&DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).unwrap();
    let v = 1.3;
    let lambda = 0.1;
    let obs = ObservationSet::from_samples(2, 2, vec![Sample { i: 0, j: 0, value: v }]).unwrap();
    let sol = solve_lagrangian(&side, &obs, lambda, &tight()).unwrap();

    let obj = |m: &DMatrix<f64>| per_sample_objective(&side, &obs, m, lambda);
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..=400_000 {
        let t = -2.0 + 1e-5 * k as f64;
        let val = (v - t).powi(2) + lambda * t.abs();
        if val < best.0 {
            best = (val, t);
        }
    }
    let expected = DMatrix::from_row_slice(2, 2, &[best.1, 0.0, 0.0, 0.0]);
    assert!((&sol.mhat - &expected).norm() <= 1e-4, "{}", sol.mhat);
    let mut g = seeded(8);
    for _ in 0..200 {
        let z = &sol.mhat + gaussian_matrix(&mut g, 2, 2) * 0.05;
        assert!(obj(&z) >= obj(&sol.mhat) - 1e-12);
    }
}

#[test]
fn aggregated_objective_matches_per_sample_objective() {
    let inst = generate_synthetic(6, 5, 2, 3, 3, 2.0, 9).unwrap();
    let obs = sample_observations(&inst, 400, NoiseSpec::gaussian(0.5), 10).unwrap();
    assert!(obs.max_count() > 1);
    let mut g = seeded(11);
    for _ in 0..10 {
        let m = gaussian_matrix(&mut g, 3, 3);
        let lhs = lagrangian_objective(&inst.side, &obs, &m, 0.3).unwrap();
        let rhs = per_sample_objective(&inst.side, &obs, &m, 0.3);
        assert!((lhs - rhs).abs() <= 1e-10 * rhs, "{lhs} vs {rhs}");
    }
}

#[test]
fn proximal_gradient_is_monotone_without_acceleration() {
    for step_rule in [StepRule::Fixed, StepRule::Backtracking] {
        let inst = generate_synthetic(20, 18, 3, 8, 6, 10.0, 12).unwrap();
        let obs = sample_observations(&inst, 150, NoiseSpec::gaussian(0.2), 13).unwrap();
        let opts = SolverOptions { accel: false, step_rule, max_iters: 500, ..SolverOptions::default() };
        let sol = solve_lagrangian(&inst.side, &obs, 1e-2, &opts).unwrap();
        for w in sol.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn kkt_dual_norm_condition() {
    let inst = generate_synthetic(20, 18, 3, 8, 6, 10.0, 14).unwrap();
    let obs = sample_observations(&inst, 200, NoiseSpec::gaussian(0.2), 15).unwrap();
    let lambda = 0.1 * lambda_max(&inst.side, &obs).unwrap();
    let sol = solve_lagrangian(&inst.side, &obs, lambda, &tight()).unwrap();
    assert!(sol.converged);
    let gmat = -gradient_oracle(&inst.side, &obs, &sol.mhat) / lambda;
    let (u, v) = active_factors(&sol.mhat);
    let keep = u.ncols();
    assert!(keep > 0);
    let on = u.transpose() * &gmat * &v;
    assert!((on - DMatrix::identity(keep, keep)).norm() <= 1e-6);
    let spec = (gmat.transpose() * &gmat).symmetric_eigen().eigenvalues.max().sqrt();
    assert!(spec <= 1.0 + 1e-6, "{spec}");
}

#[test]
fn exact_solver_full_data_pins_core() {
    let inst = generate_synthetic(10, 9, 2, 4, 4, 3.0, 16).unwrap();
    let obs = full_once(inst.ground_truth());
    let sol = solve_exact(&inst.side, &obs, &SolverOptions::default()).unwrap();
    assert!((&sol.mhat - inst.mstar()).norm() <= 1e-6);
}

#[test]
fn exact_solver_is_feasible() {
    let opts = SolverOptions::default();
    for seed in 0..5u64 {
        let inst = generate_synthetic(30, 30, 2, 8, 8, 30.0, 20 + seed).unwrap();
        let obs = sample_observations(&inst, 150, NoiseSpec::None, 30 + seed).unwrap();
        let sol = solve_exact(&inst.side, &obs, &opts).unwrap();
        let vmax = obs.samples().iter().fold(1.0f64, |a, s| a.max(s.value.abs()));
        let worst = obs
            .samples()
            .iter()
            .map(|s| (sol.rhat[(s.i as usize, s.j as usize)] - s.value).abs())
            .fold(0.0, f64::max);
        assert!(worst <= opts.tol_feas * vmax, "{worst}");
    }
}

#[test]
fn exact_solver_rejects_contradictions() {
    let side = SideInfoPair::new(&DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).unwrap();
    let samples = vec![Sample { i: 0, j: 1, value: 1.0 }, Sample { i: 0, j: 1, value: 2.0 }];
    let obs = ObservationSet::from_samples(2, 2, samples).unwrap();
    let err = solve_exact(&side, &obs, &SolverOptions::default()).unwrap_err();
    assert!(matches!(err, ImcError::Infeasible));
    assert_eq!(err.to_string(), "infeasible: contradictory observations");
}

#[test]
fn square_orthogonal_side_matches_standard_completion() {
    let (m, n) = (10, 9);
    let mut g = seeded(17);
    let target = gaussian_matrix(&mut g, m, 2) * gaussian_matrix(&mut g, 2, n);
    let q1 = haar_orthogonal(gaussian_matrix(&mut g, m, m));
    let q2 = haar_orthogonal(gaussian_matrix(&mut g, n, n));
    let rotated = SideInfoPair::new(&q1, &q2).unwrap();
    let plain = SideInfoPair::new(&DMatrix::identity(m, m), &DMatrix::identity(n, n)).unwrap();
    let obs = imc_core::model::sample_from_matrix(&target, 60, NoiseSpec::gaussian(0.1), 18).unwrap();
    let a = solve_lagrangian(&rotated, &obs, 0.05, &tight()).unwrap();
    let b = solve_lagrangian(&plain, &obs, 0.05, &tight()).unwrap();
    assert!((&a.rhat - &b.rhat).norm() <= 1e-6 * b.rhat.norm(), "{}", (&a.rhat - &b.rhat).norm());

    let clean = imc_core::model::sample_from_matrix(&target, 70, NoiseSpec::None, 19).unwrap();
    let a = solve_exact(&rotated, &clean, &SolverOptions::default()).unwrap();
    let b = solve_exact(&plain, &clean, &SolverOptions::default()).unwrap();
    assert!((&a.rhat - &b.rhat).norm() <= 1e-5 * b.rhat.norm());
}

#[test]
fn theory_lambda_examples() {
    assert_eq!(lambda_from_theory(0.0, 1.0, 40, 4000, 1.0).unwrap(), (0.0, 0.0, 0.0));
    let (lo, mid, hi) = lambda_from_theory(0.15, 1.0, 40, 4000, 1.0).unwrap();
    assert!((mid - 3.75e-4).abs() < 1e-15);
    assert_eq!((lo, hi), (mid, mid));
    let (lo, mid2, hi) = lambda_from_theory(0.15, 1.0, 40, 4000, 3.0).unwrap();
    assert_eq!(mid2, mid);
    assert!((lo - mid / 3.0).abs() < 1e-18 && (hi - 3.0 * mid).abs() < 1e-18);
    let (_, doubled, _) = lambda_from_theory(0.15, 1.0, 40, 8000, 1.0).unwrap();
    assert!((mid / doubled - 2f64.sqrt()).abs() < 1e-12);
    assert!(lambda_from_theory(0.1, 1.0, 40, 4000, 0.5).is_err());
}

#[test]
fn cross_validation_basics() {
    let inst = generate_synthetic(20, 20, 2, 6, 6, 20.0, 21).unwrap();
    let train = sample_observations(&inst, 300, NoiseSpec::None, 22).unwrap();
    let val = sample_observations(&inst, 60, NoiseSpec::None, 23).unwrap();
    let opts = SolverOptions::default();
    let single = cross_validate_lambda(&inst.side, &train, &val, &[0.01], &opts).unwrap();
    assert_eq!(single.lambda_star, 0.01);
    assert_eq!(single.val_errors.len(), 1);

    let grid = [0.0, 1e-4, 1e-2, 1.0];
    let cv = cross_validate_lambda(&inst.side, &train, &val, &grid, &opts).unwrap();
    assert_eq!(cv.lambda_star, 0.0);

    assert!(cross_validate_lambda(&inst.side, &train, &val, &[], &opts).is_err());
    assert!(cross_validate_lambda(&inst.side, &train, &val, &[1.0, 0.1], &opts).is_err());
}

#[test]
fn cross_validation_agrees_with_theory_scale() {
    // Experiment-size configuration; selected λ within a factor 10 of the
    // theoretical midpoint in at least 70% of trials.
    let (sdv, big_n, a) = (0.15, 4000, 40);
    let grid = imc_core::linalg::log_space(1e-6, 1.0, 13);
    let opts = SolverOptions::default();
    let trials = 10;
    let mut close = 0;
    for t in 0..trials {
        let inst = generate_synthetic(100, 100, 10, a, a, 100.0, 500 + t).unwrap();
        let train = sample_observations(&inst, big_n, NoiseSpec::gaussian(sdv), 600 + t).unwrap();
        let val = sample_observations(&inst, big_n / 5, NoiseSpec::gaussian(sdv), 700 + t).unwrap();
        let cv = cross_validate_lambda(&inst.side, &train, &val, &grid, &opts).unwrap();
        let (_, mid, _) = lambda_from_theory(sdv, inst.side.sigma0(), a, big_n, 1.0).unwrap();
        let ratio = cv.lambda_star / mid;
        if (0.1..=10.0).contains(&ratio) {
            close += 1;
        }
    }
    assert!(close * 10 >= trials * 7, "{close}/{trials}");
}

/// Factors `(U_k, V_k)` of the singular directions of `w` with singular
/// value above `1e-6 s_max`, from the eigendecomposition of `wᵀw`.
fn active_factors(w: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let eig = (w.transpose() * w).symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(*l));
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&k| eig.eigenvalues[k] > 1e-12 * lmax && lmax > 0.0).collect();
    let v = eig.eigenvectors.select_columns(&keep);
    let mut u = w * &v;
    for (c, &k) in keep.iter().enumerate() {
        let s = eig.eigenvalues[k].sqrt();
        u.column_mut(c).scale_mut(1.0 / s);
    }
    (u, v)
}

/// Subgradient-optimality residual of `w = svt(m, t)`.
fn svt_optimality_violation(m: &DMatrix<f64>, w: &DMatrix<f64>, t: f64) -> f64 {
    let g = (m - w) / t;
    let (rows, cols) = m.shape();
    let (uk, vk) = active_factors(w);
    let pu = &uk * uk.transpose();
    let pv = &vk * vk.transpose();
    let qu = DMatrix::identity(rows, rows) - &pu;
    let qv = DMatrix::identity(cols, cols) - &pv;
    let on = (&pu * &g * &pv - &uk * vk.transpose()).norm();
    let mixed = (&pu * &g * &qv).norm() + (&qu * &g * &pv).norm();
    let rest = &qu * &g * &qv;
    let off = (rest.transpose() * &rest).symmetric_eigen().eigenvalues.max().max(0.0).sqrt();
    on.max(mixed).max((off - 1.0).max(0.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn svt_optimality(seed in any::<u64>(), rows in 1usize..7, cols in 1usize..7, frac in 0.01f64..1.0) {
        let m = gaussian_matrix(&mut seeded(seed), rows, cols);
        let smax = (m.transpose() * &m).symmetric_eigen().eigenvalues.max().sqrt();
        let t = frac * smax;
        let w = svt(&m, t);
        prop_assert!(svt_optimality_violation(&m, &w, t) <= 1e-8);
    }

    #[test]
    fn svt_non_expansive(seed in any::<u64>(), rows in 1usize..7, cols in 1usize..7, t in 0.0f64..3.0) {
        let mut g = seeded(seed);
        let a = gaussian_matrix(&mut g, rows, cols);
        let b = gaussian_matrix(&mut g, rows, cols);
        prop_assert!((svt(&a, t) - svt(&b, t)).norm() <= (&a - &b).norm() * (1.0 + 1e-12));
    }
}
