//! Penalised and equality-constrained nuclear-norm estimators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bounds;
use crate::error::{ImcError, Result};
use crate::linalg::{self, SymPinv};
use crate::model::{ObservationSet, SideInfoPair};

pub use crate::linalg::svt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `1/L` with the global bound `L = 2 κ_max ‖X‖² ‖Y‖² / N`.
    Fixed,
    /// Start from a power-iteration estimate of the Lipschitz constant and
    /// double on failed sufficient decrease.
    #[default]
    Backtracking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub tol_rel_obj: f64,
    pub tol_feas: f64,
    pub step_rule: StepRule,
    pub accel: bool,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iters: 5000,
            tol_rel_obj: 1e-8,
            tol_feas: 1e-8,
            step_rule: StepRule::Backtracking,
            accel: true,
            seed: 0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.tol_rel_obj > 0.0) || !(self.tol_feas > 0.0) {
            return Err(ImcError::InvalidArgument(
                "solver options need max_iters >= 1 and positive tolerances".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Solution {
    #[serde(skip)]
    pub mhat: DMatrix<f64>,
    #[serde(skip)]
    pub rhat: DMatrix<f64>,
    pub objective_trace: Vec<f64>,
    pub iters: usize,
    pub converged: bool,
    /// Lagrangian: norm of the proximal-gradient map at `M̂`, relative to the
    /// gradient at zero. Exact: primal residual `‖M - W‖_F` of the splitting.
    pub kkt_residual: f64,
    /// `max_Ω |(X M̂ Yᵀ)_ij - value_ij|`.
    pub feasibility_residual: f64,
    pub lambda: f64,
}

/// Squared loss on aggregated observations.
struct DataTerm<'a> {
    x: &'a DMatrix<f64>,
    y_t: DMatrix<f64>,
    idx: Vec<(usize, usize)>,
    count: Vec<f64>,
    mean: Vec<f64>,
    n_total: f64,
    within_ss: f64,
}

impl<'a> DataTerm<'a> {
    fn new(side: &'a SideInfoPair, obs: &ObservationSet) -> Result<Self> {
        if obs.m() != side.m() || obs.n() != side.n() {
            return Err(ImcError::DimensionMismatch(format!(
                "observations are {}x{}, side information {}x{}",
                obs.m(),
                obs.n(),
                side.m(),
                side.n()
            )));
        }
        let e = obs.entries();
        Ok(DataTerm {
            x: side.x(),
            y_t: side.y().transpose(),
            idx: e.iter().map(|e| (e.i as usize, e.j as usize)).collect(),
            count: e.iter().map(|e| e.count as f64).collect(),
            mean: e.iter().map(|e| e.mean).collect(),
            n_total: obs.len().max(1) as f64,
            within_ss: obs.within_entry_ss(),
        })
    }

    /// `(X M Yᵀ)_ij` at the observed positions.
    fn predict(&self, m: &DMatrix<f64>) -> Vec<f64> {
        let xm_t = (self.x * m).transpose();
        self.idx
            .iter()
            .map(|&(i, j)| xm_t.column(i).dot(&self.y_t.column(j)))
            .collect()
    }

    fn residuals(&self, m: &DMatrix<f64>) -> Vec<f64> {
        self.predict(m).iter().zip(&self.mean).map(|(p, v)| p - v).collect()
    }

    fn value(&self, res: &[f64]) -> f64 {
        let s: f64 = res.iter().zip(&self.count).map(|(r, h)| h * r * r).sum();
        (s + self.within_ss) / self.n_total
    }

    /// `Xᵀ S Y` for the sparse matrix with `S_ij = w_ij`.
    fn adjoint(&self, w: &[f64]) -> DMatrix<f64> {
        let b = self.y_t.nrows();
        let mut sy_t = DMatrix::zeros(b, self.x.nrows());
        for (&(i, j), &wk) in self.idx.iter().zip(w) {
            if wk != 0.0 {
                sy_t.column_mut(i).axpy(wk, &self.y_t.column(j), 1.0);
            }
        }
        self.x.tr_mul(&sy_t.transpose())
    }

    fn gradient(&self, res: &[f64]) -> DMatrix<f64> {
        let scale = 2.0 / self.n_total;
        let w: Vec<f64> = res.iter().zip(&self.count).map(|(r, h)| scale * h * r).collect();
        self.adjoint(&w)
    }

    fn hessian_apply(&self, d: &DMatrix<f64>) -> DMatrix<f64> {
        let p = self.predict(d);
        self.gradient(&p)
    }

    fn lipschitz_bound(&self) -> f64 {
        let kmax = self.count.iter().copied().fold(0.0, f64::max);
        let sx = linalg::spectral_norm(self.x);
        let sy = linalg::spectral_norm(&self.y_t);
        2.0 * kmax * sx * sx * sy * sy / self.n_total
    }

    fn lipschitz_estimate(&self, a: usize, b: usize, seed: u64) -> f64 {
        let mut rng = crate::rng::seeded(seed ^ 0x11F5);
        let mut v = crate::rng::gaussian_matrix(&mut rng, a, b);
        let mut est = 0.0;
        for _ in 0..60 {
            let nv = v.norm();
            if nv == 0.0 {
                return 0.0;
            }
            v /= nv;
            let w = self.hessian_apply(&v);
            let next = w.norm();
            let done = (next - est).abs() <= 1e-4 * next;
            est = next;
            v = w;
            if done {
                break;
            }
        }
        est
    }
}

/// `‖∇f(0)‖₂`: the smallest λ for which `M̂ = 0`.
pub fn lambda_max(side: &SideInfoPair, obs: &ObservationSet) -> Result<f64> {
    let data = DataTerm::new(side, obs)?;
    let res: Vec<f64> = data.mean.iter().map(|v| -v).collect();
    Ok(linalg::spectral_norm(&data.gradient(&res)))
}

/// Per-sample penalised least squares `(1/N) Σ_k (v_k - (XMYᵀ)_k)² + λ‖M‖*`.
pub fn lagrangian_objective(side: &SideInfoPair, obs: &ObservationSet, m: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    side.check_core_shape(m)?;
    let data = DataTerm::new(side, obs)?;
    Ok(data.value(&data.residuals(m)) + lambda * linalg::nuclear_norm(m))
}

pub fn solve_lagrangian(side: &SideInfoPair, obs: &ObservationSet, lambda: f64, opts: &SolverOptions) -> Result<Solution> {
    solve_lagrangian_from(side, obs, lambda, opts, None)
}

/// Accelerated proximal gradient with adaptive restart, optionally warm
/// started.
pub fn solve_lagrangian_from(
    side: &SideInfoPair,
    obs: &ObservationSet,
    lambda: f64,
    opts: &SolverOptions,
    init: Option<&DMatrix<f64>>,
) -> Result<Solution> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(ImcError::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    opts.validate()?;
    let (a, b) = (side.a(), side.b());
    let data = DataTerm::new(side, obs)?;
    let mut m = match init {
        Some(m0) => {
            side.check_core_shape(m0)?;
            m0.clone()
        }
        None => DMatrix::zeros(a, b),
    };

    let zero_res: Vec<f64> = data.mean.iter().map(|v| -v).collect();
    let grad0_norm = data.gradient(&zero_res).norm().max(f64::MIN_POSITIVE);
    let l_bound = data.lipschitz_bound().max(f64::MIN_POSITIVE);
    let mut l = match opts.step_rule {
        StepRule::Fixed => l_bound,
        StepRule::Backtracking => (1.02 * data.lipschitz_estimate(a, b, opts.seed)).clamp(l_bound * 1e-6, l_bound),
    };

    let mut res = data.residuals(&m);
    let mut obj = data.value(&res) + lambda * linalg::nuclear_norm(&m);
    let mut trace = vec![obj];
    let mut yk = m.clone();
    let mut t = 1.0f64;
    let mut converged = false;
    let mut iters = 0;

    for k in 1..=opts.max_iters {
        iters = k;
        let res_y = if opts.accel { data.residuals(&yk) } else { res.clone() };
        let f_y = data.value(&res_y);
        let g = data.gradient(&res_y);
        let (m_new, res_new, f_new) = loop {
            let cand = svt(&(&yk - &g / l), lambda / l);
            let r_c = data.residuals(&cand);
            let f_c = data.value(&r_c);
            let d = &cand - &yk;
            let model = f_y + g.dot(&d) + 0.5 * l * d.norm_squared();
            if opts.step_rule == StepRule::Fixed || f_c <= model + 1e-12 * f_y.abs().max(1e-300) {
                break (cand, r_c, f_c);
            }
            l *= 2.0;
        };
        let obj_new = f_new + lambda * linalg::nuclear_norm(&m_new);
        let step_norm = l * (&m_new - &yk).norm() / grad0_norm;

        if opts.accel {
            let restart = obj_new > obj || (&yk - &m_new).dot(&(&m_new - &m)) > 0.0;
            if restart {
                t = 1.0;
                yk = m_new.clone();
            } else {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                yk = &m_new + (&m_new - &m) * ((t - 1.0) / t_next);
                t = t_next;
            }
        } else {
            yk = m_new.clone();
        }

        let rel = (obj - obj_new).abs() / obj_new.abs().max(f64::MIN_POSITIVE);
        m = m_new;
        res = res_new;
        obj = obj_new;
        trace.push(obj);
        if rel <= opts.tol_rel_obj && step_norm <= opts.tol_feas {
            converged = true;
            break;
        }
    }

    // Gradient map at the returned iterate.
    let g = data.gradient(&res);
    let kkt = l * (&m - svt(&(&m - &g / l), lambda / l)).norm() / grad0_norm;
    let feas = res.iter().fold(0.0f64, |acc, r| acc.max(r.abs()));
    let rhat = side.embed(&m);
    Ok(Solution {
        mhat: m,
        rhat,
        objective_trace: trace,
        iters,
        converged,
        kkt_residual: kkt,
        feasibility_residual: feas,
        lambda,
    })
}

/// Affine projection onto `{M : (X M Yᵀ)_ij = v_ij on Ω}`.
struct AffineProjector<'a> {
    data: DataTerm<'a>,
    pinv: SymPinv,
    a: usize,
    b: usize,
}

impl<'a> AffineProjector<'a> {
    fn new(data: DataTerm<'a>, a: usize, b: usize) -> Self {
        // Gram matrix of the constraint rows vec(x_i y_jᵀ), grouped by column j:
        // Σ_j (y_j y_jᵀ) ⊗ (Σ_{i ∈ Ω_j} x_i x_iᵀ).
        let n = data.y_t.ncols();
        let mut by_col: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(i, j) in &data.idx {
            by_col[j].push(i);
        }
        let ab = a * b;
        let mut g = DMatrix::zeros(ab, ab);
        for (j, rows) in by_col.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let mut s = DMatrix::<f64>::zeros(a, a);
            for &i in rows {
                let xi = data.x.row(i).transpose();
                s.ger(1.0, &xi, &xi, 1.0);
            }
            let yj = data.y_t.column(j);
            for q in 0..b {
                for q2 in 0..b {
                    let w = yj[q] * yj[q2];
                    if w == 0.0 {
                        continue;
                    }
                    let mut blk = g.view_mut((q * a, q2 * a), (a, a));
                    blk += &s * w;
                }
            }
        }
        let pinv = SymPinv::new(&g, 1e-12);
        AffineProjector { data, pinv, a, b }
    }

    fn project(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let res = self.data.residuals(z);
        let back = self.data.adjoint(&res);
        let corr = self.pinv.apply(&DVector::from_column_slice(back.as_slice()));
        z - DMatrix::from_column_slice(self.a, self.b, corr.as_slice())
    }
}

/// `min ‖M‖*` subject to `X M Yᵀ` matching every observed entry, by ADMM
/// between singular value thresholding and the affine projection.
pub fn solve_exact(side: &SideInfoPair, obs: &ObservationSet, opts: &SolverOptions) -> Result<Solution> {
    opts.validate()?;
    let (a, b) = (side.a(), side.b());
    let data = DataTerm::new(side, obs)?;
    let vscale = data.mean.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    for e in obs.entries() {
        if e.max - e.min > opts.tol_feas * vscale {
            return Err(ImcError::Infeasible);
        }
    }
    let proj = AffineProjector::new(data, a, b);
    let feas_of = |m: &DMatrix<f64>| {
        proj.data
            .residuals(m)
            .iter()
            .fold(0.0f64, |acc, r| acc.max(r.abs()))
            / vscale
    };

    let m0 = proj.project(&DMatrix::zeros(a, b));
    let scale = linalg::spectral_norm(&m0);
    if scale == 0.0 {
        let rhat = side.embed(&m0);
        return Ok(Solution {
            mhat: m0,
            rhat,
            objective_trace: vec![0.0],
            iters: 0,
            converged: true,
            kkt_residual: 0.0,
            feasibility_residual: 0.0,
            lambda: 0.0,
        });
    }
    let mut rho = 10.0 / scale;
    let mut w = m0.clone();
    let mut dual = DMatrix::zeros(a, b);
    let mut nuc = linalg::nuclear_norm(&w);
    let mut trace = vec![nuc];
    let mut converged = false;
    let mut iters = 0;
    let mut primal = f64::INFINITY;

    for k in 1..=opts.max_iters {
        iters = k;
        let m = proj.project(&(&w - &dual));
        let w_new = svt(&(&m + &dual), 1.0 / rho);
        let diff = &m - &w_new;
        primal = diff.norm();
        let dual_res = rho * (&w_new - &w).norm();
        dual += &diff;
        w = w_new;
        let nuc_new = linalg::nuclear_norm(&w);
        let rel = (nuc_new - nuc).abs() / nuc_new.max(f64::MIN_POSITIVE);
        nuc = nuc_new;
        trace.push(nuc);
        if rel <= opts.tol_rel_obj && feas_of(&w) <= opts.tol_feas {
            converged = true;
            break;
        }
        if k % 10 == 0 {
            if primal > 10.0 * dual_res {
                rho *= 2.0;
                dual /= 2.0;
            } else if dual_res > 10.0 * primal {
                rho /= 2.0;
                dual *= 2.0;
            }
        }
    }

    let mhat = proj.project(&w);
    let feasibility_residual = feas_of(&mhat) * vscale;
    let rhat = side.embed(&mhat);
    Ok(Solution {
        mhat,
        rhat,
        objective_trace: trace,
        iters,
        converged,
        kkt_residual: primal,
        feasibility_residual,
        lambda: 0.0,
    })
}

/// Interval of admissible λ and its geometric midpoint.
pub fn lambda_from_theory(sdv: f64, sigma0: f64, a: usize, n_samples: usize, c: f64) -> Result<(f64, f64, f64)> {
    if !(sdv >= 0.0) || n_samples == 0 || a == 0 || !(c >= 1.0) || !(sigma0 > 0.0) {
        return Err(ImcError::InvalidArgument("need sdv >= 0, N >= 1, a >= 1, C >= 1, sigma0 > 0".into()));
    }
    Ok(bounds::lambda_window(sdv, sigma0, a, n_samples, c))
}

/// Root mean squared error of `X M Yᵀ` against every validation sample.
pub fn validation_rmse(side: &SideInfoPair, val: &ObservationSet, m: &DMatrix<f64>) -> Result<f64> {
    if val.is_empty() {
        return Err(ImcError::InvalidArgument("empty validation set".into()));
    }
    let data = DataTerm::new(side, val)?;
    Ok(data.value(&data.residuals(m)).sqrt())
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub lambda_star: f64,
    /// Validation RMSE in grid order.
    pub val_errors: Vec<f64>,
    pub solution: Solution,
}

/// Fit along the grid from the largest λ down with warm starts and keep the
/// λ with the smallest validation RMSE (ties go to the smaller λ).
pub fn cross_validate_lambda(
    side: &SideInfoPair,
    train: &ObservationSet,
    val: &ObservationSet,
    grid: &[f64],
    opts: &SolverOptions,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(ImcError::InvalidArgument("lambda grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(ImcError::InvalidArgument("lambda grid must be sorted ascending".into()));
    }
    let mut errors = vec![0.0; grid.len()];
    let mut fits: Vec<Option<Solution>> = vec![None; grid.len()];
    let mut warm: Option<DMatrix<f64>> = None;
    for k in (0..grid.len()).rev() {
        let sol = solve_lagrangian_from(side, train, grid[k], opts, warm.as_ref())?;
        errors[k] = validation_rmse(side, val, &sol.mhat)?;
        warm = Some(sol.mhat.clone());
        fits[k] = Some(sol);
    }
    let mut best = 0;
    for k in 1..grid.len() {
        if errors[k] < errors[best] {
            best = k;
        }
    }
    Ok(CvResult {
        lambda_star: grid[best],
        val_errors: errors,
        solution: fits[best].take().expect("every grid point was fitted"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ObservationSet, Sample};

    #[test]
    fn svt_zero_threshold_is_identity() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0]);
        assert!((svt(&m, 0.0) - &m).norm() < 1e-12);
    }

    #[test]
    fn svt_diagonal_example() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let s = svt(&m, 2.0);
        assert!((s - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).norm() < 1e-12);
    }

    #[test]
    fn negative_lambda_rejected() {
        let side = SideInfoPair::new(&DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).unwrap();
        let obs = ObservationSet::from_samples(2, 2, vec![Sample { i: 0, j: 0, value: 1.0 }]).unwrap();
        assert!(solve_lagrangian(&side, &obs, -1.0, &SolverOptions::default()).is_err());
    }

    #[test]
    fn contradictory_samples_rejected() {
        let side = SideInfoPair::new(&DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).unwrap();
        let obs = ObservationSet::from_samples(
            2,
            2,
            vec![Sample { i: 0, j: 0, value: 1.0 }, Sample { i: 0, j: 0, value: 1.5 }],
        )
        .unwrap();
        let err = solve_exact(&side, &obs, &SolverOptions::default()).unwrap_err();
        assert_eq!(err.to_string(), "infeasible: contradictory observations");
    }

    #[test]
    fn theory_lambda_zero_noise() {
        assert_eq!(lambda_from_theory(0.0, 1.0, 5, 10, 1.0).unwrap(), (0.0, 0.0, 0.0));
    }
}
