//! Side-information norms and the projections `P_T`, `P_T⊥`, `P_Ω`.
//!
//! `P_T⊥` is read as the complement of `P_T` inside `P_X(·)P_Y`:
//! `P_T(Z) + P_T⊥(Z) = P_X Z P_Y`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ImcError, Result};
use crate::linalg;
use crate::model::{ObservationSet, ProblemInstance, SideInfoPair};
use crate::rng;

/// Relative tolerance for the range check in [`xnuc_norm`].
pub const RANGE_TOL: f64 = 1e-8;

/// `Σ₁⁻¹ X̄ᵀ Z Ȳ Σ₂⁻¹`, the unique `M` with `X M Yᵀ = P_X Z P_Y`.
pub fn canonical_core(z: &DMatrix<f64>, side: &SideInfoPair) -> Result<DMatrix<f64>> {
    side.check_target_shape(z)?;
    let c = side.x_bar().transpose() * z * side.y_bar();
    let s1 = side.sigma1();
    let s2 = side.sigma2();
    Ok(DMatrix::from_fn(c.nrows(), c.ncols(), |p, q| c[(p, q)] / (s1[p] * s2[q])))
}

/// `‖Z - P_X Z P_Y‖_F`.
pub fn range_residual(z: &DMatrix<f64>, side: &SideInfoPair) -> Result<f64> {
    side.check_target_shape(z)?;
    let c = side.x_bar().transpose() * z * side.y_bar();
    let inside = side.x_bar() * c * side.y_bar().transpose();
    Ok((z - inside).norm())
}

/// `min{‖M‖* : X M Yᵀ = Z}`.
pub fn xnuc_norm(z: &DMatrix<f64>, side: &SideInfoPair) -> Result<f64> {
    let res = range_residual(z, side)?;
    if res > RANGE_TOL * z.norm() {
        return Err(ImcError::NotRepresentable);
    }
    Ok(linalg::nuclear_norm(&canonical_core(z, side)?))
}

/// `‖Xᵀ Z Y‖₂`.
pub fn xspec_norm(z: &DMatrix<f64>, side: &SideInfoPair) -> Result<f64> {
    side.check_target_shape(z)?;
    Ok(linalg::spectral_norm(&(side.x().transpose() * z * side.y())))
}

/// Orthonormal coordinates (inside `col(X̄)` and `col(Ȳ)`) of the tangent
/// factors `E`, `F` at a core `M* = A D Bᵀ`.
///
/// `E` spans `X̄Σ₁A` and `X̄Σ₁⁻¹A`, so both the ground truth and the dual
/// certificate lie in `T`. It reduces to `X̄A` when `Σ₁ = I`.
pub fn tangent_factors(
    side: &SideInfoPair,
    a_f: &DMatrix<f64>,
    b_f: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let span = |sigma: &DVector<f64>, f: &DMatrix<f64>| {
        let k = f.ncols();
        let mut g = DMatrix::zeros(f.nrows(), 2 * k);
        for p in 0..f.nrows() {
            for l in 0..k {
                g[(p, l)] = sigma[p] * f[(p, l)];
                g[(p, k + l)] = f[(p, l)] / sigma[p];
            }
        }
        linalg::orth(&g, 1e-10)
    };
    (span(side.sigma1(), a_f), span(side.sigma2(), b_f))
}

/// Factored projectors for one instance.
#[derive(Debug, Clone)]
pub struct ProjectorContext {
    x_bar: DMatrix<f64>,
    y_bar: DMatrix<f64>,
    ea: DMatrix<f64>,
    fb: DMatrix<f64>,
}

/// Which operator [`operator_deviation`] estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationMode {
    Tangent,
    Complement,
}

/// Power-iteration estimate of an operator norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const POWER_TOL: f64 = 1e-6;
pub const POWER_MAX_ITERS: usize = 500;
const POWER_SEED: u64 = 0x5EED_0F7A11;

impl ProjectorContext {
    pub fn new(instance: &ProblemInstance) -> Self {
        Self::from_factors(&instance.side, instance.core_left(), instance.core_right())
    }

    pub fn from_factors(side: &SideInfoPair, a_f: &DMatrix<f64>, b_f: &DMatrix<f64>) -> Self {
        let (ea, fb) = tangent_factors(side, a_f, b_f);
        ProjectorContext {
            x_bar: side.x_bar().clone(),
            y_bar: side.y_bar().clone(),
            ea,
            fb,
        }
    }

    pub fn m(&self) -> usize {
        self.x_bar.nrows()
    }
    pub fn n(&self) -> usize {
        self.y_bar.nrows()
    }
    pub fn rank_e(&self) -> usize {
        self.ea.ncols()
    }
    pub fn rank_f(&self) -> usize {
        self.fb.ncols()
    }
    /// `E = X̄ E_a` (m × rank_e).
    pub fn e(&self) -> DMatrix<f64> {
        &self.x_bar * &self.ea
    }
    pub fn f(&self) -> DMatrix<f64> {
        &self.y_bar * &self.fb
    }

    /// `X̄ᵀ Z Ȳ`.
    pub fn coords(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.x_bar.transpose() * z * &self.y_bar
    }
    /// `X̄ C Ȳᵀ`.
    pub fn lift(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        &self.x_bar * c * self.y_bar.transpose()
    }

    /// `P_T` acting on coordinates `C` of `X̄ C Ȳᵀ`.
    pub fn tangent_coords(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let left = &self.ea * (self.ea.transpose() * c);
        let right = (c * &self.fb) * self.fb.transpose();
        let both = (&left * &self.fb) * self.fb.transpose();
        left + right - both
    }

    /// `P_T⊥` acting on coordinates.
    pub fn complement_coords(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        c - self.tangent_coords(c)
    }

    /// `P_E Z P_Y + P_X Z P_F - P_E Z P_F`.
    pub fn project_t(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.lift(&self.tangent_coords(&self.coords(z)))
    }

    /// `(P_X - P_E) Z (P_Y - P_F)`.
    pub fn project_t_perp(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.lift(&self.complement_coords(&self.coords(z)))
    }

    pub fn dense_px(&self) -> DMatrix<f64> {
        &self.x_bar * self.x_bar.transpose()
    }
    pub fn dense_py(&self) -> DMatrix<f64> {
        &self.y_bar * self.y_bar.transpose()
    }
    pub fn dense_pe(&self) -> DMatrix<f64> {
        let e = self.e();
        &e * e.transpose()
    }
    pub fn dense_pf(&self) -> DMatrix<f64> {
        let f = self.f();
        &f * f.transpose()
    }

    /// Apply `C ↦ Π(C) - (mn/N) Π(X̄ᵀ (H ∘ X̄ Π(C) Ȳᵀ) Ȳ)` in coordinates,
    /// where `Π` is the tangent or complement projection.
    fn deviation_apply(&self, c: &DMatrix<f64>, obs: &ObservationSet, mode: DeviationMode) -> DMatrix<f64> {
        let proj = |c: &DMatrix<f64>| match mode {
            DeviationMode::Tangent => self.tangent_coords(c),
            DeviationMode::Complement => self.complement_coords(c),
        };
        let pc = proj(c);
        let sampled = self.sampled_gram(&pc, obs.entries().iter().map(|e| (e.i, e.j, e.count)));
        let scale = (self.m() * self.n()) as f64 / obs.len().max(1) as f64;
        &pc - proj(&sampled) * scale
    }
}

impl ProjectorContext {
    /// `X̄ᵀ (H ∘ X̄ C Ȳᵀ) Ȳ` from a list of `(i, j, h_ij)`.
    pub fn sampled_gram(&self, c: &DMatrix<f64>, counts: impl IntoIterator<Item = (u32, u32, u32)>) -> DMatrix<f64> {
        let xc = &self.x_bar * c;
        let b = self.y_bar.ncols();
        let mut sy = DMatrix::zeros(self.x_bar.nrows(), b);
        for (i, j, h) in counts {
            let (i, j) = (i as usize, j as usize);
            let mut v = 0.0;
            for q in 0..b {
                v += xc[(i, q)] * self.y_bar[(j, q)];
            }
            v *= h as f64;
            for q in 0..b {
                sy[(i, q)] += v * self.y_bar[(j, q)];
            }
        }
        self.x_bar.transpose() * sy
    }
}

pub fn project_t(z: &DMatrix<f64>, ctx: &ProjectorContext) -> DMatrix<f64> {
    ctx.project_t(z)
}

pub fn project_t_perp(z: &DMatrix<f64>, ctx: &ProjectorContext) -> DMatrix<f64> {
    ctx.project_t_perp(z)
}

/// `[P_Ω(Z)]_ij = h_ij Z_ij`.
pub fn project_omega(z: &DMatrix<f64>, obs: &ObservationSet) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(z.nrows(), z.ncols());
    for e in obs.entries() {
        let (i, j) = (e.i as usize, e.j as usize);
        out[(i, j)] = e.count as f64 * z[(i, j)];
    }
    out
}

/// Norm of `P_T - (mn/N) P_T P_Ω P_T` (or its complement analogue),
/// estimated by seeded power iteration.
pub fn operator_deviation(ctx: &ProjectorContext, obs: &ObservationSet, mode: DeviationMode) -> DeviationEstimate {
    let a = ctx.x_bar.ncols();
    let b = ctx.y_bar.ncols();
    let mut r = rng::seeded(POWER_SEED);
    let start = rng::gaussian_matrix(&mut r, a, b);
    let mut v = match mode {
        DeviationMode::Tangent => ctx.tangent_coords(&start),
        DeviationMode::Complement => ctx.complement_coords(&start),
    };
    let nv = v.norm();
    if nv == 0.0 {
        return DeviationEstimate { value: 0.0, iterations: 0, converged: true };
    }
    v /= nv;
    let mut prev = f64::NAN;
    for it in 1..=POWER_MAX_ITERS {
        let w = ctx.deviation_apply(&v, obs, mode);
        let est = w.norm();
        if est <= f64::MIN_POSITIVE {
            return DeviationEstimate { value: 0.0, iterations: it, converged: true };
        }
        if (est - prev).abs() <= POWER_TOL * est {
            return DeviationEstimate { value: est, iterations: it, converged: true };
        }
        prev = est;
        v = w / est;
    }
    log::warn!("operator deviation power iteration hit the {POWER_MAX_ITERS}-iteration cap");
    DeviationEstimate { value: prev, iterations: POWER_MAX_ITERS, converged: false }
}

/// Tangent-space deviation `‖P_T - (mn/N) P_T P_Ω P_T‖`.
pub fn operator_deviation_t(ctx: &ProjectorContext, obs: &ObservationSet) -> DeviationEstimate {
    operator_deviation(ctx, obs, DeviationMode::Tangent)
}
