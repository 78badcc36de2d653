//! Synthetic instances, error metrics, the empirical Rademacher estimator
//! and the sample-size sweep.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::certificates::golfing_certificate;
use crate::error::{ImcError, Result};
use crate::linalg;
use crate::model::{sample_observations, NoiseSpec, ProblemInstance, SideInfoPair};
use crate::rng::{self, gaussian_matrix, mix_seed};
use crate::solvers::{cross_validate_lambda, SolverOptions};
use crate::xnorms::canonical_core;

/// Random instance: `R = U Vᵀ` (Gaussian factors) scaled to `fro_norm`, with
/// orthonormal side information whose span contains the row and column
/// spaces of `R` and is otherwise uniformly oriented.
pub fn generate_synthetic(
    m: usize,
    n: usize,
    r: usize,
    a: usize,
    b: usize,
    fro_norm: f64,
    seed: u64,
) -> Result<ProblemInstance> {
    if r == 0 || r > a || a > m || r > b || b > n {
        return Err(ImcError::InvalidArgument(format!(
            "need 1 <= r <= a <= m and r <= b <= n (m={m}, n={n}, r={r}, a={a}, b={b})"
        )));
    }
    if !(fro_norm > 0.0 && fro_norm.is_finite()) {
        return Err(ImcError::InvalidArgument("fro_norm must be positive".into()));
    }
    let mut g = rng::seeded(seed);
    let u = gaussian_matrix(&mut g, m, r);
    let v = gaussian_matrix(&mut g, n, r);
    let mut target = &u * v.transpose();
    target *= fro_norm / target.norm();
    let x = side_basis(&mut g, &u, a);
    let y = side_basis(&mut g, &v, b);
    let side = SideInfoPair::new(&x, &y)?;
    let core = canonical_core(&target, &side)?;
    ProblemInstance::from_side(side, core)
}

fn side_basis(g: &mut rng::Rng, factor: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let (rows, r) = factor.shape();
    let mut stacked = DMatrix::zeros(rows, dim);
    stacked.columns_mut(0, r).copy_from(factor);
    if dim > r {
        stacked.columns_mut(r, dim - r).copy_from(&gaussian_matrix(g, rows, dim - r));
    }
    let basis = stacked.qr().q();
    let rot = linalg::haar_orthogonal(gaussian_matrix(g, dim, dim));
    basis * rot
}

/// Error of an estimate against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `‖R̂ - R‖_F / √(mn)`.
    pub rmse_fro: f64,
    /// Mean over all entries of `E|R̂_ij - R_ij - ζ|`.
    pub abs_loss: f64,
    /// Mean over all entries of `E min((R̂_ij - R_ij - ζ)², cap)`.
    pub trunc_l2: f64,
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E|d + ζ|` for `ζ ~ N(0, s²)` (folded normal mean).
pub fn folded_normal_mean(d: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return d.abs();
    }
    s * (2.0 / std::f64::consts::PI).sqrt() * (-d * d / (2.0 * s * s)).exp() + d * (1.0 - 2.0 * std_normal_cdf(-d / s))
}

/// `E min((d + ζ)², cap)` for `ζ ~ N(0, s²)`.
pub fn truncated_square_mean(d: f64, s: f64, cap: f64) -> f64 {
    if s <= 0.0 {
        return (d * d).min(cap);
    }
    let t = cap.sqrt();
    let (al, be) = ((-t - d) / s, (t - d) / s);
    let p_in = std_normal_cdf(be) - std_normal_cdf(al);
    let (fa, fb) = (std_normal_pdf(al), std_normal_pdf(be));
    let inside = d * d * p_in + 2.0 * d * s * (fa - fb) + s * s * (p_in + al * fa - be * fb);
    inside + cap * (1.0 - p_in)
}

pub fn error_metrics(rhat: &DMatrix<f64>, instance: &ProblemInstance, noise: NoiseSpec, trunc_cap: f64) -> Result<Metrics> {
    instance.side.check_target_shape(rhat)?;
    if !(trunc_cap > 0.0) {
        return Err(ImcError::InvalidArgument("truncation cap must be positive".into()));
    }
    let diff = rhat - instance.ground_truth();
    let count = diff.len() as f64;
    let s = noise.sdv();
    let abs_loss = diff.iter().map(|&d| folded_normal_mean(d, s)).sum::<f64>() / count;
    let trunc_l2 = diff.iter().map(|&d| truncated_square_mean(d, s, trunc_cap)).sum::<f64>() / count;
    Ok(Metrics { rmse_fro: diff.norm() / count.sqrt(), abs_loss, trunc_l2 })
}

/// Monte-Carlo estimate of `E_ε sup_{‖M‖*≤𝓜} (1/N) Σ_k ε_k (X M Yᵀ)_{ξ_k}`
/// for one uniform draw of `N` positions.
pub fn empirical_rademacher(side: &SideInfoPair, m_norm: f64, n_samples: usize, mc_trials: usize, seed: u64) -> Result<f64> {
    if !(m_norm >= 0.0) || n_samples == 0 || mc_trials == 0 {
        return Err(ImcError::InvalidArgument("need Mnorm >= 0, N >= 1, mc_trials >= 1".into()));
    }
    let (m, n) = (side.m(), side.n());
    let mut g = rng::seeded(seed);
    let pos: Vec<(usize, usize)> = (0..n_samples).map(|_| (g.random_range(0..m), g.random_range(0..n))).collect();
    let x = side.x();
    let y_t = side.y().transpose();
    let mut total = 0.0;
    for _ in 0..mc_trials {
        let mut sy_t = DMatrix::<f64>::zeros(side.b(), m);
        for &(i, j) in &pos {
            let eps = if g.random::<bool>() { 1.0 } else { -1.0 };
            sy_t.column_mut(i).axpy(eps, &y_t.column(j), 1.0);
        }
        let s = x.tr_mul(&sy_t.transpose());
        total += linalg::spectral_norm(&s);
    }
    Ok(m_norm * total / (mc_trials as f64 * n_samples as f64))
}

/// Sweep configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub a: usize,
    pub b: usize,
    pub fro_norm: f64,
    pub sigma_list: Vec<f64>,
    #[serde(rename = "N_grid", alias = "n_grid")]
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub lambda_grid: Vec<f64>,
    pub val_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub solver_opts: SolverOptions,
    /// Cap for the truncated squared loss.
    #[serde(default = "default_trunc_cap")]
    pub trunc_cap: f64,
}

fn default_trunc_cap() -> f64 {
    1.0
}

pub fn default_lambda_grid() -> Vec<f64> {
    linalg::log_space(1e-6, 1.0, 13)
}

fn log_grid_counts(lo: f64, hi: f64, points: usize) -> Vec<usize> {
    let mut g: Vec<usize> = linalg::log_space(lo, hi, points).into_iter().map(|v| v.round() as usize).collect();
    g.dedup();
    g
}

impl SweepConfig {
    /// 60×60, rank 5, 20-dimensional side information, 20 trials.
    pub fn desk() -> Self {
        let (m, n, r, a, b) = (60, 60, 5, 20, 20);
        SweepConfig {
            m,
            n,
            r,
            a,
            b,
            fro_norm: 60.0,
            sigma_list: vec![0.0, 0.05, 0.15, 0.3],
            n_grid: log_grid_counts((a * r) as f64, 0.8 * (m * n) as f64, 12),
            trials: 20,
            lambda_grid: default_lambda_grid(),
            val_fraction: 0.2,
            seed: 0,
            solver_opts: SolverOptions::default(),
            trunc_cap: default_trunc_cap(),
        }
    }

    /// 100×100, rank 10, 40-dimensional side information, Frobenius norm
    /// 100, 40 trials.
    pub fn paper_figure() -> Self {
        let (m, n, r, a, b) = (100, 100, 10, 40, 40);
        SweepConfig {
            m,
            n,
            r,
            a,
            b,
            fro_norm: 100.0,
            sigma_list: vec![0.0, 0.05, 0.15, 0.3],
            n_grid: log_grid_counts((a * r) as f64, 0.8 * (m * n) as f64, 12),
            trials: 40,
            lambda_grid: default_lambda_grid(),
            val_fraction: 0.2,
            seed: 0,
            solver_opts: SolverOptions::default(),
            trunc_cap: default_trunc_cap(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper-figure" => Some(Self::paper_figure()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ImcError::InvalidArgument(msg));
        if self.r == 0 || self.r > self.a || self.a > self.m || self.r > self.b || self.b > self.n {
            return bad("need 1 <= r <= a <= m and r <= b <= n".into());
        }
        if !(self.fro_norm > 0.0) {
            return bad("fro_norm must be positive".into());
        }
        if self.sigma_list.is_empty() || self.sigma_list.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("sigma_list must be non-empty with non-negative entries".into());
        }
        if self.n_grid.is_empty() || self.n_grid[0] == 0 || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("N_grid must be non-empty, positive and strictly ascending".into());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.lambda_grid.is_empty()
            || self.lambda_grid.iter().any(|l| !(*l >= 0.0))
            || self.lambda_grid.windows(2).any(|w| w[0] > w[1])
        {
            return bad("lambda_grid must be non-empty, non-negative and ascending".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return bad("val_fraction must lie in (0, 0.5]".into());
        }
        if !(self.trunc_cap > 0.0) {
            return bad("trunc_cap must be positive".into());
        }
        self.solver_opts.validate()
    }

    pub fn cell_count(&self) -> usize {
        self.sigma_list.len() * self.n_grid.len() * self.trials
    }

    /// Cells in output order: sigma, then N, then trial.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::with_capacity(self.cell_count());
        for &sigma in &self.sigma_list {
            for &big_n in &self.n_grid {
                for trial in 0..self.trials {
                    out.push(SweepCell {
                        id: out.len(),
                        sigma,
                        n_samples: big_n,
                        trial,
                        seed: mix_seed(self.seed, &[sigma.to_bits(), big_n as u64, trial as u64]),
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub id: usize,
    pub sigma: f64,
    pub n_samples: usize,
    pub trial: usize,
    pub seed: u64,
}

/// One sweep row. A failed cell carries NaN metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    #[serde(rename = "N")]
    pub n_samples: usize,
    pub trial: usize,
    pub rmse_fro: f64,
    pub abs_loss: f64,
    pub trunc_l2: f64,
    pub lambda_selected: f64,
    pub nuc_norm_gap: f64,
    pub runtime_s: f64,
    pub seed: u64,
}

pub const SWEEP_CSV_HEADER: &str = "sigma,N,trial,rmse_fro,abs_loss,trunc_l2,lambda_selected,nuc_norm_gap,runtime_s,seed";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.6},{}",
            self.sigma,
            self.n_samples,
            self.trial,
            crate::io::fmt_f64(self.rmse_fro),
            crate::io::fmt_f64(self.abs_loss),
            crate::io::fmt_f64(self.trunc_l2),
            crate::io::fmt_f64(self.lambda_selected),
            crate::io::fmt_f64(self.nuc_norm_gap),
            self.runtime_s,
            self.seed
        )
    }

    /// Row equality ignoring wall-clock time, with NaN equal to NaN.
    pub fn same_result(&self, other: &SweepRow) -> bool {
        let eq = |x: f64, y: f64| x.to_bits() == y.to_bits();
        eq(self.sigma, other.sigma)
            && self.n_samples == other.n_samples
            && self.trial == other.trial
            && eq(self.rmse_fro, other.rmse_fro)
            && eq(self.abs_loss, other.abs_loss)
            && eq(self.trunc_l2, other.trunc_l2)
            && eq(self.lambda_selected, other.lambda_selected)
            && eq(self.nuc_norm_gap, other.nuc_norm_gap)
            && self.seed == other.seed
    }
}

/// Run a single cell: fresh instance, training and validation draws,
/// cross-validated λ, metrics.
pub fn run_sweep_cell(config: &SweepConfig, cell: &SweepCell) -> SweepRow {
    let start = Instant::now();
    let outcome = (|| -> Result<(Metrics, f64, f64)> {
        let inst = generate_synthetic(
            config.m,
            config.n,
            config.r,
            config.a,
            config.b,
            config.fro_norm,
            mix_seed(cell.seed, &[1]),
        )?;
        let noise = NoiseSpec::gaussian(cell.sigma);
        let train = sample_observations(&inst, cell.n_samples, noise, mix_seed(cell.seed, &[2]))?;
        let n_val = ((config.val_fraction * cell.n_samples as f64).round() as usize).max(1);
        let val = sample_observations(&inst, n_val, noise, mix_seed(cell.seed, &[3]))?;
        let cv = cross_validate_lambda(&inst.side, &train, &val, &config.lambda_grid, &config.solver_opts)?;
        let metrics = error_metrics(&cv.solution.rhat, &inst, noise, config.trunc_cap)?;
        let gap = linalg::nuclear_norm(&cv.solution.mhat) - inst.mstar_nuclear_norm();
        Ok((metrics, cv.lambda_star, gap))
    })();
    let runtime_s = start.elapsed().as_secs_f64();
    let (metrics, lambda_selected, nuc_norm_gap) = match outcome {
        Ok(v) => v,
        Err(e) => {
            log::warn!("sweep cell sigma={} N={} trial={} failed: {e}", cell.sigma, cell.n_samples, cell.trial);
            let nan = f64::NAN;
            (Metrics { rmse_fro: nan, abs_loss: nan, trunc_l2: nan }, nan, nan)
        }
    };
    SweepRow {
        sigma: cell.sigma,
        n_samples: cell.n_samples,
        trial: cell.trial,
        rmse_fro: metrics.rmse_fro,
        abs_loss: metrics.abs_loss,
        trunc_l2: metrics.trunc_l2,
        lambda_selected,
        nuc_norm_gap,
        runtime_s,
        seed: cell.seed,
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

/// Run every cell on the rayon pool and hand rows to `sink` in cell order.
pub fn run_sweep<F>(config: &SweepConfig, mut sink: F) -> Result<SweepResult>
where
    F: FnMut(&SweepRow) -> Result<()>,
{
    config.validate()?;
    let cells = config.cells();
    let (tx, rx) = mpsc::channel::<(usize, SweepRow)>();
    let mut rows = Vec::with_capacity(cells.len());
    let mut sink_err = None;
    std::thread::scope(|s| {
        let cells = &cells;
        s.spawn(move || {
            cells.par_iter().for_each_with(tx, |tx, cell| {
                let row = run_sweep_cell(config, cell);
                let _ = tx.send((cell.id, row));
            });
        });
        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (id, row) in rx {
            pending.insert(id, row);
            while let Some(row) = pending.remove(&next) {
                if sink_err.is_none() {
                    if let Err(e) = sink(&row) {
                        sink_err = Some(e);
                    }
                }
                rows.push(row);
                next += 1;
            }
        }
    });
    match sink_err {
        Some(e) => Err(e),
        None => Ok(SweepResult { rows }),
    }
}

/// Mean and standard deviation of each metric for one `(sigma, N)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub sigma: f64,
    #[serde(rename = "N")]
    pub n_samples: usize,
    pub trials: usize,
    pub failures: usize,
    pub rmse_fro_mean: f64,
    pub rmse_fro_std: f64,
    pub abs_loss_mean: f64,
    pub abs_loss_std: f64,
    pub trunc_l2_mean: f64,
    pub trunc_l2_std: f64,
    pub nuc_norm_gap_mean: f64,
    pub lambda_selected_median: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummaryRow> {
    let mut groups: Vec<((u64, usize), Vec<&SweepRow>)> = Vec::new();
    for row in rows {
        let key = (row.sigma.to_bits(), row.n_samples);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(row),
            None => groups.push((key, vec![row])),
        }
    }
    groups
        .into_iter()
        .map(|(_, g)| {
            let ok: Vec<&SweepRow> = g.iter().copied().filter(|r| r.rmse_fro.is_finite()).collect();
            let col = |f: fn(&SweepRow) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (rm, rs) = mean_std(&col(|r| r.rmse_fro));
            let (am, as_) = mean_std(&col(|r| r.abs_loss));
            let (tm, ts) = mean_std(&col(|r| r.trunc_l2));
            let (gm, _) = mean_std(&col(|r| r.nuc_norm_gap));
            SweepSummaryRow {
                sigma: g[0].sigma,
                n_samples: g[0].n_samples,
                trials: g.len(),
                failures: g.len() - ok.len(),
                rmse_fro_mean: rm,
                rmse_fro_std: rs,
                abs_loss_mean: am,
                abs_loss_std: as_,
                trunc_l2_mean: tm,
                trunc_l2_std: ts,
                nuc_norm_gap_mean: gm,
                lambda_selected_median: median(&mut col(|r| r.lambda_selected)),
            }
        })
        .collect()
}

/// Shape statistics of an error curve sampled on an ascending grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveShape {
    /// Sign changes of the discrete second difference.
    pub second_diff_sign_changes: usize,
    /// Largest `v_k - v_{k+1}`.
    pub max_drop: f64,
    /// Median of `v_k - v_{k+1}` over all steps.
    pub median_drop: f64,
    /// Steps with `v_{k+1} > v_k`.
    pub increases: usize,
}

impl CurveShape {
    pub fn analyze(values: &[f64]) -> Self {
        let mut drops: Vec<f64> = values.windows(2).map(|w| w[0] - w[1]).collect();
        let second: Vec<f64> = values.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).collect();
        let signs: Vec<f64> = second.iter().filter(|v| **v != 0.0).map(|v| v.signum()).collect();
        let changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
        let increases = drops.iter().filter(|d| **d < 0.0).count();
        let max_drop = drops.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        CurveShape { second_diff_sign_changes: changes, max_drop, median_drop: median(&mut drops), increases }
    }
}

/// Pass rate of the default golfing construction at each `N` of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateThreshold {
    pub n_grid: Vec<usize>,
    pub pass_rates: Vec<f64>,
    /// Smallest grid value at which at least half the trials pass.
    pub threshold: Option<usize>,
}

/// Measure where golfing starts to succeed: at each `N`, `q = ⌈q₀⌉` batches
/// of size `⌊N/q⌋`, over `trials` fresh instances.
#[allow(clippy::too_many_arguments)]
pub fn measure_certificate_threshold(
    m: usize,
    n: usize,
    r: usize,
    a: usize,
    b: usize,
    n_grid: &[usize],
    trials: usize,
    delta: f64,
    seed: u64,
) -> Result<CertificateThreshold> {
    let mut pass_rates = Vec::with_capacity(n_grid.len());
    let mut threshold = None;
    for &big_n in n_grid {
        let mut passed = 0;
        for t in 0..trials {
            let s = mix_seed(seed, &[big_n as u64, t as u64]);
            let inst = generate_synthetic(m, n, r, a, b, 1.0, mix_seed(s, &[1]))?;
            let obs = sample_observations(&inst, big_n, NoiseSpec::None, mix_seed(s, &[2]))?;
            let tau = crate::bounds::tau5(big_n, m, n, delta)
                .min(if big_n <= m * n { crate::bounds::tau5_tilde(m, n, delta) } else { f64::INFINITY });
            let q = (crate::bounds::golfing_q0(inst.side.sigma0(), a, tau).ceil() as usize).max(1);
            let batch = big_n / q;
            if batch == 0 {
                continue;
            }
            if golfing_certificate(&inst, &obs, q, batch, mix_seed(s, &[3]))?.passed {
                passed += 1;
            }
        }
        let rate = passed as f64 / trials.max(1) as f64;
        if threshold.is_none() && rate >= 0.5 {
            threshold = Some(big_n);
        }
        pass_rates.push(rate);
    }
    Ok(CertificateThreshold { n_grid: n_grid.to_vec(), pass_rates, threshold })
}
