use nalgebra::DMatrix;
use proptest::prelude::*;

use imc_core::model::{build_problem_instance, sample_observations, NoiseSpec, ObservationSet, Sample, SideInfoPair};
use imc_core::rng::{gaussian_matrix, seeded};
use imc_core::synthlab::generate_synthetic;
use imc_core::xnorms::{
    canonical_core, operator_deviation, operator_deviation_t, project_omega, project_t, project_t_perp, xnuc_norm,
    xspec_norm, DeviationMode, ProjectorContext,
};
use imc_core::ImcError;

/// Nuclear norm via the eigenvalues of `MᵀM`.
fn nuclear_oracle(m: &DMatrix<f64>) -> f64 {
    let g = if m.nrows() < m.ncols() { m * m.transpose() } else { m.transpose() * m };
    let ev = g.symmetric_eigen().eigenvalues;
    let top = ev.iter().fold(0.0f64, |a, l| a.max(*l));
    ev.iter().filter(|l| **l > 1e-13 * top).map(|l| l.sqrt()).sum()
}

fn spectral_oracle(m: &DMatrix<f64>) -> f64 {
    (m.transpose() * m).symmetric_eigen().eigenvalues.iter().fold(0.0f64, |a, l| a.max(*l)).sqrt()
}

/// `(AᵀA)⁻¹ Aᵀ` for a full-column-rank `A`.
fn left_pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a.transpose() * a).try_inverse().unwrap() * a.transpose()
}

fn projector(a: &DMatrix<f64>) -> DMatrix<f64> {
    a * left_pinv(a)
}

fn identity_side(m: usize, n: usize) -> SideInfoPair {
    SideInfoPair::new(&DMatrix::identity(m, m), &DMatrix::identity(n, n)).unwrap()
}

fn diag_side() -> SideInfoPair {
    let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]);
    SideInfoPair::new(&x, &DMatrix::identity(2, 2)).unwrap()
}

fn random_instance(seed: u64, m: usize, n: usize, a: usize, b: usize, r: usize) -> imc_core::model::ProblemInstance {
    let mut g = seeded(seed);
    let x = gaussian_matrix(&mut g, m, a);
    let y = gaussian_matrix(&mut g, n, b);
    let core = gaussian_matrix(&mut g, a, r) * gaussian_matrix(&mut g, r, b);
    build_problem_instance(&x, &y, &core).unwrap()
}

#[test]
fn canonical_core_identity() {
    let side = identity_side(3, 4);
    let z = gaussian_matrix(&mut seeded(1), 3, 4);
    assert!((canonical_core(&z, &side).unwrap() - &z).norm() < 1e-14);
}

#[test]
fn canonical_core_scaled_column() {
    let z = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
    let m = canonical_core(&z, &diag_side()).unwrap();
    assert!((m - DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0])).norm() < 1e-14);
}

#[test]
fn canonical_core_annihilates_complement() {
    let x = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]);
    let y = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 0.0]);
    let side = SideInfoPair::new(&x, &y).unwrap();
    let z = DMatrix::from_fn(3, 3, |i, j| if i == 0 || j == 1 { 0.0 } else { (1 + i + j) as f64 });
    assert!(canonical_core(&z, &side).unwrap().norm() == 0.0);
}

#[test]
fn canonical_core_reproduces_projection() {
    let inst = random_instance(5, 8, 7, 3, 4, 2);
    let side = &inst.side;
    let z = gaussian_matrix(&mut seeded(6), 8, 7);
    let m = canonical_core(&z, side).unwrap();
    let px = projector(side.x());
    let py = projector(side.y());
    assert!((side.embed(&m) - &px * &z * &py).norm() <= 1e-10 * z.norm());
}

#[test]
fn xnuc_equals_nuclear_for_orthonormal_side() {
    let mut g = seeded(7);
    let x = gaussian_matrix(&mut g, 9, 4).qr().q();
    let y = gaussian_matrix(&mut g, 8, 3).qr().q();
    let side = SideInfoPair::new(&x, &y).unwrap();
    let z = &x * gaussian_matrix(&mut g, 4, 3) * y.transpose();
    assert!((xnuc_norm(&z, &side).unwrap() - nuclear_oracle(&z)).abs() < 1e-10);
}

#[test]
fn xnuc_of_zero() {
    let side = diag_side();
    assert_eq!(xnuc_norm(&DMatrix::zeros(2, 2), &side).unwrap(), 0.0);
}

#[test]
fn xnuc_matches_pseudo_inverse_oracle() {
    let mut g = seeded(8);
    let x = gaussian_matrix(&mut g, 3, 2);
    let y = gaussian_matrix(&mut g, 4, 3);
    let side = SideInfoPair::new(&x, &y).unwrap();
    let z = side.embed(&gaussian_matrix(&mut g, 2, 3));
    let m = left_pinv(side.x()) * &z * left_pinv(side.y()).transpose();
    assert!((xnuc_norm(&z, &side).unwrap() - nuclear_oracle(&m)).abs() < 1e-8);
}

#[test]
fn xnuc_rejects_out_of_range() {
    let x = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]);
    let side = SideInfoPair::new(&x, &x).unwrap();
    let z = DMatrix::from_fn(3, 3, |i, j| (i + j) as f64);
    let err = xnuc_norm(&z, &side).unwrap_err();
    assert!(matches!(err, ImcError::NotRepresentable));
    assert_eq!(err.to_string(), "Z not representable as XMYᵀ");
}

#[test]
fn xspec_identity_is_spectral() {
    let z = gaussian_matrix(&mut seeded(9), 5, 3);
    assert!((xspec_norm(&z, &identity_side(5, 3)).unwrap() - spectral_oracle(&z)).abs() < 1e-10);
}

#[test]
fn xspec_scaled_column() {
    let z = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
    assert!((xspec_norm(&z, &diag_side()).unwrap() - 2.0).abs() < 1e-14);
}

#[test]
fn duality_on_random_pairs() {
    let mut g = seeded(10);
    for _ in 0..200 {
        let x = gaussian_matrix(&mut g, 5, 3);
        let y = gaussian_matrix(&mut g, 6, 2);
        let side = SideInfoPair::new(&x, &y).unwrap();
        let a = side.embed(&gaussian_matrix(&mut g, 3, 2));
        let b = gaussian_matrix(&mut g, 5, 6);
        let lhs = a.dot(&b).abs();
        assert!(lhs <= xnuc_norm(&a, &side).unwrap() * xspec_norm(&b, &side).unwrap() * (1.0 + 1e-8) + 1e-8);
    }
}

#[test]
fn projectors_fix_ground_truth() {
    let inst = generate_synthetic(12, 10, 2, 5, 4, 3.0, 11).unwrap();
    let ctx = ProjectorContext::new(&inst);
    let r = inst.ground_truth();
    assert!((project_t(r, &ctx) - r).norm() <= 1e-10 * r.norm());
    assert!(project_t_perp(r, &ctx).norm() <= 1e-10 * r.norm());
}

#[test]
fn projectors_annihilate_outside_range() {
    let inst = random_instance(12, 9, 8, 3, 3, 2);
    let ctx = ProjectorContext::new(&inst);
    let qx = DMatrix::identity(9, 9) - projector(inst.side.x());
    let qy = DMatrix::identity(8, 8) - projector(inst.side.y());
    let z = &qx * gaussian_matrix(&mut seeded(13), 9, 8) * &qy;
    assert!(project_t(&z, &ctx).norm() <= 1e-10 * z.norm());
    assert!(project_t_perp(&z, &ctx).norm() <= 1e-10 * z.norm());
}

#[test]
fn identity_side_reduces_to_standard_completion() {
    let mut g = seeded(14);
    let (m, n) = (7, 6);
    let core = gaussian_matrix(&mut g, m, 2) * gaussian_matrix(&mut g, 2, n);
    let inst = build_problem_instance(&DMatrix::identity(m, m), &DMatrix::identity(n, n), &core).unwrap();
    let ctx = ProjectorContext::new(&inst);
    let pe = projector(&inst.core_left().clone());
    let pf = projector(&inst.core_right().clone());
    let z = gaussian_matrix(&mut g, m, n);
    let expected = (DMatrix::identity(m, m) - &pe) * &z * (DMatrix::identity(n, n) - &pf);
    assert!((project_t_perp(&z, &ctx) - expected).norm() < 1e-10 * z.norm());
}

#[test]
fn dense_projectors_are_orthogonal_projectors() {
    let inst = generate_synthetic(14, 11, 3, 6, 5, 1.0, 15).unwrap();
    let ctx = ProjectorContext::new(&inst);
    for (p, rank) in [(ctx.dense_px(), 6), (ctx.dense_py(), 5), (ctx.dense_pe(), 3), (ctx.dense_pf(), 3)] {
        assert!((&p * &p - &p).norm() < 1e-10);
        assert!((&p - p.transpose()).norm() < 1e-12);
        assert!((p.trace() - rank as f64).abs() < 1e-10);
    }
    assert_eq!(ctx.rank_e(), 3);
    assert_eq!(ctx.rank_f(), 3);
}

#[test]
fn project_omega_examples() {
    let z = DMatrix::from_fn(3, 3, |i, j| (1 + i * 3 + j) as f64);
    let empty = ObservationSet::from_samples(3, 3, vec![]).unwrap();
    assert_eq!(project_omega(&z, &empty), DMatrix::zeros(3, 3));

    let once: Vec<Sample> =
        (0..3u32).flat_map(|i| (0..3u32).map(move |j| Sample { i, j, value: 0.0 })).filter(|s| s.i != s.j).collect();
    let obs = ObservationSet::from_samples(3, 3, once).unwrap();
    let expected = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { z[(i, j)] });
    assert_eq!(project_omega(&z, &obs), expected);

    let thrice = vec![Sample { i: 1, j: 2, value: 0.0 }; 3];
    let obs = ObservationSet::from_samples(3, 3, thrice).unwrap();
    let out = project_omega(&z, &obs);
    assert_eq!(out[(1, 2)], 3.0 * z[(1, 2)]);
    assert_eq!(out.iter().filter(|v| **v != 0.0).count(), 1);
}

#[test]
fn deviation_vanishes_under_full_coverage() {
    let inst = generate_synthetic(8, 7, 2, 4, 3, 1.0, 16).unwrap();
    let all: Vec<Sample> =
        (0..8u32).flat_map(|i| (0..7u32).map(move |j| Sample { i, j, value: 0.0 })).collect();
    let obs = ObservationSet::from_samples(8, 7, all).unwrap();
    let ctx = ProjectorContext::new(&inst);
    assert!(operator_deviation_t(&ctx, &obs).value < 1e-10);
    assert!(operator_deviation(&ctx, &obs, DeviationMode::Complement).value < 1e-10);
}

/// Dense `mn × mn` matrix of `P − (mn/N) P D P` for a projector `P` on
/// column-major vectorised matrices.
fn dense_deviation(p: &DMatrix<f64>, obs: &ObservationSet) -> f64 {
    let (m, n) = (obs.m(), obs.n());
    let d = DMatrix::from_fn(m * n, m * n, |k, l| {
        if k == l {
            obs.count(k % m, k / m) as f64
        } else {
            0.0
        }
    });
    let scale = (m * n) as f64 / obs.len() as f64;
    let op = p - p * d * p * scale;
    op.symmetric_eigen().eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()))
}

#[test]
fn deviation_matches_dense_oracle() {
    for seed in 0..5u64 {
        let inst = generate_synthetic(6, 5, 2, 3, 3, 1.0, 100 + seed).unwrap();
        let obs = sample_observations(&inst, 60, NoiseSpec::None, 200 + seed).unwrap();
        let px = projector(inst.side.x());
        let py = projector(inst.side.y());
        let e = inst.side.x_bar() * inst.core_left();
        let f = inst.side.y_bar() * inst.core_right();
        let pe = projector(&e);
        let pf = projector(&f);
        let pt = py.kronecker(&pe) + pf.kronecker(&px) - pf.kronecker(&pe);
        let pc = (&py - &pf).kronecker(&(&px - &pe));
        let ctx = ProjectorContext::new(&inst);
        let est_t = operator_deviation(&ctx, &obs, DeviationMode::Tangent);
        let est_c = operator_deviation(&ctx, &obs, DeviationMode::Complement);
        let dense_t = dense_deviation(&pt, &obs);
        let dense_c = dense_deviation(&pc, &obs);
        assert!(est_t.converged && est_c.converged);
        assert!((est_t.value - dense_t).abs() <= 1e-4 * dense_t.max(1.0), "{} vs {dense_t}", est_t.value);
        assert!((est_c.value - dense_c).abs() <= 1e-4 * dense_c.max(1.0), "{} vs {dense_c}", est_c.value);
    }
}

#[test]
fn deviation_scales_like_inverse_root_n() {
    let median = |big_n: usize| {
        let mut v: Vec<f64> = (0..41u64)
            .map(|t| {
                let inst = generate_synthetic(20, 20, 2, 8, 8, 1.0, 300 + t).unwrap();
                let obs = sample_observations(&inst, big_n, NoiseSpec::None, 400 + t + big_n as u64).unwrap();
                operator_deviation_t(&ProjectorContext::new(&inst), &obs).value
            })
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[20]
    };
    let ratio = median(4000) / median(8000);
    assert!((ratio / 2f64.sqrt() - 1.0).abs() <= 0.2, "ratio {ratio}");
}

fn instance_strategy() -> impl Strategy<Value = (u64, usize, usize, usize, usize, usize)> {
    (1usize..5, 1usize..5).prop_flat_map(|(a, b)| {
        (any::<u64>(), a..a + 6, b..b + 6, Just(a), Just(b), 1..=a.min(b))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projector_algebra((seed, m, n, a, b, r) in instance_strategy()) {
        let inst = random_instance(seed, m, n, a, b, r);
        let ctx = ProjectorContext::new(&inst);
        let mut g = seeded(seed ^ 0x55);
        let z = gaussian_matrix(&mut g, m, n);
        let w = gaussian_matrix(&mut g, m, n);
        let scale = z.norm() * w.norm();
        let pt = project_t(&z, &ctx);
        let pc = project_t_perp(&z, &ctx);
        prop_assert!((project_t(&pt, &ctx) - &pt).norm() <= 1e-10 * z.norm());
        prop_assert!((project_t_perp(&pc, &ctx) - &pc).norm() <= 1e-10 * z.norm());
        prop_assert!(pt.dot(&pc).abs() <= 1e-10 * z.norm_squared());
        prop_assert!((project_t(&z, &ctx).dot(&w) - z.dot(&project_t(&w, &ctx))).abs() <= 1e-10 * scale);
        prop_assert!((project_t_perp(&z, &ctx).dot(&w) - z.dot(&project_t_perp(&w, &ctx))).abs() <= 1e-10 * scale);
        let inside = projector(inst.side.x()) * &z * projector(inst.side.y());
        prop_assert!((&pt + &pc - inside).norm() <= 1e-10 * z.norm());
        prop_assert!((project_t(inst.ground_truth(), &ctx) - inst.ground_truth()).norm() <= 1e-10 * inst.ground_truth().norm());
    }

    #[test]
    fn norm_chain((seed, m, n, a, b, _r) in instance_strategy()) {
        let inst = random_instance(seed, m, n, a, b, 1);
        let side = &inst.side;
        let core = gaussian_matrix(&mut seeded(seed ^ 0xAA), a, b);
        let z = side.embed(&core);
        let xnuc = xnuc_norm(&z, side).unwrap();
        let core_nuc = nuclear_oracle(&core);
        prop_assert!((xnuc - core_nuc).abs() <= 1e-8 * core_nuc.max(1.0));
        let znuc = nuclear_oracle(&z);
        prop_assert!(znuc <= xnuc * (1.0 + 1e-8) + 1e-12);
        prop_assert!(xnuc <= znuc / side.sigma0().powi(2) * (1.0 + 1e-8) + 1e-12);
    }
}
