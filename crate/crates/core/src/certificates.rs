//! Incoherence constants, the dual certificate `U`, golfing and the
//! error-decomposition diagnostics.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bounds;
use crate::error::{ImcError, Result};
use crate::linalg;
use crate::model::{multiplicity_stats, ObservationSet, ProblemInstance, SideInfoPair};
use crate::solvers::Solution;
use crate::xnorms::{self, ProjectorContext};

/// Incoherence constants of an instance.
///
/// Row-norm forms: `μ_X = m max_i ‖X̄_i‖² / a` (likewise `Y`, and `E`, `F`
/// with `r` in place of `a`). Entry forms: `m ‖X̄‖∞²`, `a ‖A‖∞²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncoherenceReport {
    pub mu_x: f64,
    pub mu_y: f64,
    pub mu_x_strict: f64,
    pub mu_y_strict: f64,
    pub mu_a: f64,
    pub mu_b: f64,
    pub mu_e: f64,
    pub mu_f: f64,
    /// Max over the four entry forms.
    pub mu: f64,
    /// `max(μ_A, μ_B)`.
    pub mu_bar: f64,
    /// Max over the row-norm forms of `X̄, Ȳ, E, F`; controls `‖P_T(e_i e_jᵀ)‖_F`.
    pub mu_rows: f64,
    /// `(mn/r) σ₀⁴ ‖X̄Σ₁⁻¹ABᵀΣ₂⁻¹Ȳᵀ‖∞²`.
    pub mu1: f64,
    /// `μ̄² μ² r` with `μ = max(m‖X̄‖∞², n‖Ȳ‖∞²)`.
    pub mu1_upper: f64,
}

impl IncoherenceReport {
    pub fn compute(side: &SideInfoPair, a_f: &DMatrix<f64>, b_f: &DMatrix<f64>) -> Self {
        let (m, n, a, b) = (side.m() as f64, side.n() as f64, side.a() as f64, side.b() as f64);
        let r = a_f.ncols().max(1) as f64;
        let mu_x = m * linalg::max_row_norm_sq(side.x_bar()) / a;
        let mu_y = n * linalg::max_row_norm_sq(side.y_bar()) / b;
        let mu_x_strict = m * linalg::max_abs(side.x_bar()).powi(2);
        let mu_y_strict = n * linalg::max_abs(side.y_bar()).powi(2);
        let mu_a = a * linalg::max_abs(a_f).powi(2);
        let mu_b = b * linalg::max_abs(b_f).powi(2);
        let (ea, fb) = xnorms::tangent_factors(side, a_f, b_f);
        let e = side.x_bar() * &ea;
        let f = side.y_bar() * &fb;
        let mu_e = m * linalg::max_row_norm_sq(&e) / ea.ncols().max(1) as f64;
        let mu_f = n * linalg::max_row_norm_sq(&f) / fb.ncols().max(1) as f64;
        let u = certificate_from_factors(side, a_f, b_f);
        let s0 = side.sigma0();
        let mu1 = m * n / r * s0.powi(4) * linalg::max_abs(&u).powi(2);
        let mu = mu_x_strict.max(mu_y_strict).max(mu_a).max(mu_b);
        let mu_bar = mu_a.max(mu_b);
        let mu_side = mu_x_strict.max(mu_y_strict);
        IncoherenceReport {
            mu_x,
            mu_y,
            mu_x_strict,
            mu_y_strict,
            mu_a,
            mu_b,
            mu_e,
            mu_f,
            mu,
            mu_bar,
            mu_rows: mu_x.max(mu_y).max(mu_e).max(mu_f),
            mu1,
            mu1_upper: mu_bar * mu_bar * mu_side * mu_side * r,
        }
    }
}

pub fn incoherence_mu(instance: &ProblemInstance) -> IncoherenceReport {
    instance.incoherence().clone()
}

fn certificate_from_factors(side: &SideInfoPair, a_f: &DMatrix<f64>, b_f: &DMatrix<f64>) -> DMatrix<f64> {
    let s1 = side.sigma1();
    let s2 = side.sigma2();
    let left = DMatrix::from_fn(a_f.nrows(), a_f.ncols(), |p, l| a_f[(p, l)] / s1[p]);
    let right = DMatrix::from_fn(b_f.nrows(), b_f.ncols(), |q, l| b_f[(q, l)] / s2[q]);
    (side.x_bar() * left) * (side.y_bar() * right).transpose()
}

/// `U = X̄ Σ₁⁻¹ A Bᵀ Σ₂⁻¹ Ȳᵀ`, so that `Xᵀ U Y = A Bᵀ`.
pub fn dual_certificate_u(instance: &ProblemInstance) -> DMatrix<f64> {
    certificate_from_factors(&instance.side, instance.core_left(), instance.core_right())
}

/// Multiplicity bound used in the certificate conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TauChoice {
    /// Largest observed multiplicity.
    Observed,
    /// High-probability bound at failure probability `delta5`.
    Tau5 { delta5: f64 },
    Fixed { tau: f64 },
}

/// Golfing configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GolfingParams {
    pub q: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub tau: TauChoice,
}

/// Result of the golfing construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateReport {
    #[serde(skip)]
    pub y_cert: DMatrix<f64>,
    pub cond13_value: f64,
    pub cond13_bound: f64,
    pub cond14_value: f64,
    pub cond14_bound: f64,
    pub tau_used: f64,
    pub q_used: usize,
    pub batch_size: usize,
    pub passed: bool,
    /// `‖W_{t+1}‖_F = ‖P_T(𝒴_t) - U‖_F` after each batch.
    pub residual_trace: Vec<f64>,
}

/// Golfing with `τ` set to the observed maximum multiplicity.
pub fn golfing_certificate(
    instance: &ProblemInstance,
    obs: &ObservationSet,
    q: usize,
    batch_size: usize,
    seed: u64,
) -> Result<CertificateReport> {
    golfing_certificate_with(instance, obs, &GolfingParams { q, batch_size, seed, tau: TauChoice::Observed })
}

pub fn golfing_certificate_with(
    instance: &ProblemInstance,
    obs: &ObservationSet,
    params: &GolfingParams,
) -> Result<CertificateReport> {
    let GolfingParams { q, batch_size, seed, tau } = *params;
    if q == 0 || batch_size == 0 {
        return Err(ImcError::InvalidArgument("q and batch_size must be positive".into()));
    }
    let used = q
        .checked_mul(batch_size)
        .filter(|&u| u <= obs.len())
        .ok_or_else(|| {
            ImcError::InvalidArgument(format!(
                "insufficient samples: q * batch_size = {q} * {batch_size} exceeds N = {}",
                obs.len()
            ))
        })?;
    if obs.m() != instance.m() || obs.n() != instance.n() {
        return Err(ImcError::DimensionMismatch("observations do not match the instance".into()));
    }
    let tau_used = match tau {
        TauChoice::Observed => obs.max_count().max(1) as f64,
        TauChoice::Tau5 { delta5 } => multiplicity_stats(obs, delta5)?.tau5_bound,
        TauChoice::Fixed { tau } => tau,
    };

    let n = instance.n();
    let mut perm: Vec<u32> = (0..used as u32).collect();
    perm.shuffle(&mut crate::rng::seeded(seed));
    let samples = obs.samples();
    let mut counter = BatchCounter::new(instance.m(), n);
    let batches = perm.chunks(batch_size).map(|batch| {
        counter.counts(batch.iter().map(|&k| {
            let s = samples[k as usize];
            (s.i, s.j)
        }))
    });
    run_golfing(instance, batches, q, batch_size, tau_used)
}

/// Golfing on freshly drawn batches: `q` independent batches of
/// `batch_size` uniform positions. Equivalent in distribution to
/// [`golfing_certificate`] on `q·batch_size` i.i.d. samples, without
/// materialising them. `τ` is the largest multiplicity over all batches.
pub fn golfing_certificate_sampled(
    instance: &ProblemInstance,
    q: usize,
    batch_size: usize,
    seed: u64,
) -> Result<CertificateReport> {
    if q == 0 || batch_size == 0 {
        return Err(ImcError::InvalidArgument("q and batch_size must be positive".into()));
    }
    let (m, n) = (instance.m(), instance.n());
    let mut rng = crate::rng::seeded(seed);
    let mut total = vec![0u32; m * n];
    let mut batches = Vec::with_capacity(q);
    let mut counter = BatchCounter::new(m, n);
    for _ in 0..q {
        let draws = (0..batch_size).map(|_| (rng.random_range(0..m as u32), rng.random_range(0..n as u32)));
        let counts = counter.counts(draws);
        for &(i, j, h) in &counts {
            total[i as usize * n + j as usize] += h;
        }
        batches.push(counts);
    }
    let tau_used = total.iter().copied().max().unwrap_or(0).max(1) as f64;
    run_golfing(instance, batches.into_iter(), q, batch_size, tau_used)
}

/// Dense scratch space turning a stream of positions into `(i, j, h_ij)`.
struct BatchCounter {
    n: usize,
    slots: Vec<u32>,
    touched: Vec<u32>,
}

impl BatchCounter {
    fn new(m: usize, n: usize) -> Self {
        BatchCounter { n, slots: vec![0; m * n], touched: Vec::new() }
    }

    fn counts(&mut self, positions: impl Iterator<Item = (u32, u32)>) -> Vec<(u32, u32, u32)> {
        for (i, j) in positions {
            let p = i as usize * self.n + j as usize;
            if self.slots[p] == 0 {
                self.touched.push(p as u32);
            }
            self.slots[p] += 1;
        }
        self.touched.sort_unstable();
        let out = self
            .touched
            .iter()
            .map(|&p| ((p as usize / self.n) as u32, (p as usize % self.n) as u32, self.slots[p as usize]))
            .collect();
        for &p in &self.touched {
            self.slots[p as usize] = 0;
        }
        self.touched.clear();
        out
    }
}

/// `W₁ = U`, `𝒴_t = 𝒴_{t-1} + (mn/T) P_Ωt(W_t)`, `W_{t+1} = W_t - (mn/T) P_T P_Ωt(W_t)`.
fn run_golfing(
    instance: &ProblemInstance,
    batches: impl Iterator<Item = Vec<(u32, u32, u32)>>,
    q: usize,
    batch_size: usize,
    tau_used: f64,
) -> Result<CertificateReport> {
    let (m, n) = (instance.m(), instance.n());
    let ctx = ProjectorContext::new(instance);
    let u = dual_certificate_u(instance);
    let mut w = ctx.coords(&u);
    let scale = (m * n) as f64 / batch_size as f64;
    let mut y_cert = DMatrix::zeros(m, n);
    let mut trace = Vec::with_capacity(q);
    for counts in batches {
        let wx = ctx.lift(&w);
        for &(i, j, h) in &counts {
            let (i, j) = (i as usize, j as usize);
            y_cert[(i, j)] += scale * h as f64 * wx[(i, j)];
        }
        let step = ctx.tangent_coords(&ctx.sampled_gram(&w, counts.iter().copied()));
        w -= step * scale;
        trace.push(w.norm());
    }

    let side = &instance.side;
    let s0 = side.sigma0();
    let (r, a) = (instance.rank() as f64, instance.a() as f64);
    let cond13_value = (ctx.project_t(&y_cert) - &u).norm();
    let cond13_bound = 0.25 * (r / (3.0 * a * tau_used)).sqrt() * s0 * s0;
    let cond14_value = xnorms::xspec_norm(&ctx.project_t_perp(&y_cert), side)?;
    let cond14_bound = 0.5;
    Ok(CertificateReport {
        y_cert,
        cond13_value,
        cond13_bound,
        cond14_value,
        cond14_bound,
        tau_used,
        q_used: q,
        batch_size,
        passed: cond13_value <= cond13_bound && cond14_value <= cond14_bound,
        residual_trace: trace,
    })
}

/// Default golfing schedule at a given sample budget: `T̄` from the
/// instance's measured constants and `q₀` with `τ = τ₅(N)` (or `τ̃₅` when
/// `N <= mn`, whichever is smaller).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GolfingSchedule {
    pub tbar: f64,
    pub q0: f64,
    pub q: usize,
    pub batch_size: usize,
    pub n_required: usize,
    pub tau: f64,
}

pub fn default_golfing_schedule(instance: &ProblemInstance, delta: f64) -> GolfingSchedule {
    let inc = instance.incoherence();
    let (m, n) = (instance.m(), instance.n());
    let tbar = bounds::tbar(
        inc.mu_rows,
        inc.mu1,
        instance.side.sigma0(),
        instance.rank(),
        instance.a(),
        instance.b(),
        m,
        n,
        delta,
    );
    let batch_size = tbar.ceil() as usize;
    let tau_at = |big_n: usize| {
        let t5 = bounds::tau5(big_n, m, n, delta);
        if big_n <= m * n {
            t5.min(bounds::tau5_tilde(m, n, delta))
        } else {
            t5
        }
    };
    // q₀ depends on N through τ; iterate to a fixed point.
    let mut q = 1usize;
    let mut q0 = 0.0;
    let mut tau = 0.0;
    for _ in 0..100 {
        tau = tau_at(q * batch_size);
        q0 = bounds::golfing_q0(instance.side.sigma0(), instance.a(), tau);
        let next = (q0.ceil() as usize).max(1);
        if next <= q {
            break;
        }
        q = next;
    }
    GolfingSchedule { tbar, q0, q, batch_size, n_required: q * batch_size, tau }
}

/// Parameters for [`check_recovery_diagnostics`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticParams {
    pub c: f64,
    pub delta0: f64,
    pub delta5: f64,
}

impl Default for DiagnosticParams {
    fn default() -> Self {
        DiagnosticParams { c: 1.0, delta0: 0.01, delta5: 0.01 }
    }
}

/// Split of `R̂ - R` into its observed part `H` and unobserved part `Z`,
/// with the matching theoretical bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub h_nuc: f64,
    pub z_nuc: f64,
    pub err_nuc: f64,
    pub h_bound: f64,
    pub z_bound: f64,
    pub total_bound: f64,
    pub b_const: f64,
    pub kappa: f64,
    pub tau: f64,
    pub lambda: f64,
    pub lambda_in_window: bool,
    pub h_ok: bool,
    pub z_ok: bool,
    pub total_ok: bool,
}

pub fn check_recovery_diagnostics(
    solution: &Solution,
    instance: &ProblemInstance,
    obs: &ObservationSet,
    lambda: f64,
    sdv: f64,
    params: &DiagnosticParams,
) -> Result<DiagnosticsRecord> {
    let diff = &solution.rhat - instance.ground_truth();
    if diff.shape() != (obs.m(), obs.n()) {
        return Err(ImcError::DimensionMismatch("solution does not match observations".into()));
    }
    let mut h = DMatrix::zeros(obs.m(), obs.n());
    for e in obs.entries() {
        let (i, j) = (e.i as usize, e.j as usize);
        h[(i, j)] = diff[(i, j)];
    }
    let z = &diff - &h;
    let big_n = obs.len().max(1) as f64;
    let stats = multiplicity_stats(obs, params.delta5)?;
    let tau = stats.tau5_tilde.map_or(stats.tau5_bound, |t| t.min(stats.tau5_bound));
    let kappa = (stats.min_count as f64).max(1.0);
    let b_const = (2.0 * (2.0 * big_n / params.delta0).ln()).sqrt();
    let a = instance.a() as f64;
    let s0sq = instance.side.sigma0().powi(2);
    let c = params.c;
    let z_bound = 32.0 * c * a * b_const * b_const / s0sq * sdv * (3.0 * tau * big_n / kappa).sqrt();
    let h_bound = 6.0 * c * a.sqrt() * b_const * sdv * (big_n / kappa).sqrt();
    let total_bound = 70.0 * c * a * b_const * b_const / s0sq * sdv * (tau * big_n / kappa).sqrt();
    let (lo, _, hi) = bounds::lambda_window(sdv, instance.side.sigma0(), instance.a(), obs.len(), c);
    let h_nuc = linalg::nuclear_norm(&h);
    let z_nuc = linalg::nuclear_norm(&z);
    let err_nuc = linalg::nuclear_norm(&diff);
    Ok(DiagnosticsRecord {
        h_nuc,
        z_nuc,
        err_nuc,
        h_bound,
        z_bound,
        total_bound,
        b_const,
        kappa,
        tau,
        lambda,
        lambda_in_window: lambda >= lo * (1.0 - 1e-12) && lambda <= hi * (1.0 + 1e-12),
        h_ok: h_nuc <= h_bound,
        z_ok: z_nuc <= z_bound,
        total_ok: err_nuc <= total_bound,
    })
}
