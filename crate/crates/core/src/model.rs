//! Side information, problem instances and observation sampling.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds;
use crate::certificates::IncoherenceReport;
use crate::error::{ImcError, Result};
use crate::linalg;
use crate::rng;

/// Relative singular-value floor below which side information is rank deficient.
pub const FULL_RANK_TOL: f64 = 1e-10;
/// Relative tolerance for the numerical rank of the core.
pub const CORE_RANK_TOL: f64 = 1e-9;

/// One side of the side information after preprocessing.
///
/// The input `X0 = U S Vᵀ` is stored as `X = U diag(s / s_max)`, so that
/// `X̄ = U` and `Σ = s / s_max`.
#[derive(Debug, Clone)]
pub struct SideFactor {
    pre: DMatrix<f64>,
    bar: DMatrix<f64>,
    sigma: DVector<f64>,
    rot: DMatrix<f64>,
    scale: f64,
}

impl SideFactor {
    fn new(x: &DMatrix<f64>) -> Result<Self> {
        let (m, a) = x.shape();
        if a == 0 || m < a || x.iter().any(|v| !v.is_finite()) {
            return Err(ImcError::NotFullRank);
        }
        let d = linalg::svd(x);
        let smax = d.s[0];
        if smax <= 0.0 || d.s[a - 1] / smax <= FULL_RANK_TOL {
            return Err(ImcError::NotFullRank);
        }
        let sigma = &d.s / smax;
        let pre = &d.u * DMatrix::from_diagonal(&sigma);
        Ok(SideFactor {
            pre,
            bar: d.u,
            sigma,
            rot: d.v_t.transpose(),
            scale: smax,
        })
    }
}

/// Preprocessed side information `(X, Y)`.
#[derive(Debug, Clone)]
pub struct SideInfoPair {
    x: SideFactor,
    y: SideFactor,
    sigma0: f64,
}

impl SideInfoPair {
    pub fn new(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Self> {
        let x = SideFactor::new(x)?;
        let y = SideFactor::new(y)?;
        let sigma0 = x.sigma.min().min(y.sigma.min());
        Ok(SideInfoPair { x, y, sigma0 })
    }

    pub fn m(&self) -> usize {
        self.x.pre.nrows()
    }
    pub fn n(&self) -> usize {
        self.y.pre.nrows()
    }
    pub fn a(&self) -> usize {
        self.x.pre.ncols()
    }
    pub fn b(&self) -> usize {
        self.y.pre.ncols()
    }
    /// Preprocessed `X = X̄ Σ₁`.
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x.pre
    }
    pub fn y(&self) -> &DMatrix<f64> {
        &self.y.pre
    }
    pub fn x_bar(&self) -> &DMatrix<f64> {
        &self.x.bar
    }
    pub fn y_bar(&self) -> &DMatrix<f64> {
        &self.y.bar
    }
    pub fn sigma1(&self) -> &DVector<f64> {
        &self.x.sigma
    }
    pub fn sigma2(&self) -> &DVector<f64> {
        &self.y.sigma
    }
    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    /// `X M Yᵀ` for a core in the preprocessed basis.
    pub fn embed(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.x.pre * m * self.y.pre.transpose()
    }

    /// Map a core for the original `(X0, Y0)` into the preprocessed basis.
    pub fn core_from_original(&self, m0: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_core_shape(m0)?;
        Ok(self.x.scale * self.y.scale * self.x.rot.transpose() * m0 * &self.y.rot)
    }

    /// Inverse of [`Self::core_from_original`].
    pub fn core_to_original(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_core_shape(m)?;
        Ok(&self.x.rot * m * self.y.rot.transpose() / (self.x.scale * self.y.scale))
    }

    pub fn check_core_shape(&self, m: &DMatrix<f64>) -> Result<()> {
        if m.shape() != (self.a(), self.b()) {
            return Err(ImcError::DimensionMismatch(format!(
                "core is {}x{}, side information expects {}x{}",
                m.nrows(),
                m.ncols(),
                self.a(),
                self.b()
            )));
        }
        Ok(())
    }

    pub fn check_target_shape(&self, z: &DMatrix<f64>) -> Result<()> {
        if z.shape() != (self.m(), self.n()) {
            return Err(ImcError::DimensionMismatch(format!(
                "matrix is {}x{}, expected {}x{}",
                z.nrows(),
                z.ncols(),
                self.m(),
                self.n()
            )));
        }
        Ok(())
    }
}

/// Side information plus a ground-truth core `M*` (preprocessed basis).
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub side: SideInfoPair,
    mstar: DMatrix<f64>,
    r: usize,
    core_left: DMatrix<f64>,
    core_sv: DVector<f64>,
    core_right: DMatrix<f64>,
    target: DMatrix<f64>,
    incoherence: IncoherenceReport,
}

/// Build an instance from original side information and a core expressed in
/// the same (original) basis.
pub fn build_problem_instance(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    mstar: &DMatrix<f64>,
) -> Result<ProblemInstance> {
    let side = SideInfoPair::new(x, y)?;
    let core = side.core_from_original(mstar)?;
    ProblemInstance::from_side(side, core)
}

impl ProblemInstance {
    /// Instance from already preprocessed side information and a core in
    /// the preprocessed basis.
    pub fn from_side(side: SideInfoPair, mstar: DMatrix<f64>) -> Result<Self> {
        side.check_core_shape(&mstar)?;
        let d = linalg::svd(&mstar);
        let smax = d.s.iter().copied().fold(0.0, f64::max);
        if smax == 0.0 || !smax.is_finite() {
            return Err(ImcError::InvalidArgument("core matrix must be nonzero and finite".into()));
        }
        let r = d.s.iter().filter(|&&s| s > CORE_RANK_TOL * smax).count();
        let core_left = d.u.columns(0, r).into_owned();
        let core_right = d.v_t.rows(0, r).transpose();
        let core_sv = d.s.rows(0, r).into_owned();
        let target = side.embed(&mstar);
        let incoherence = IncoherenceReport::compute(&side, &core_left, &core_right);
        Ok(ProblemInstance {
            side,
            mstar,
            r,
            core_left,
            core_sv,
            core_right,
            target,
            incoherence,
        })
    }

    pub fn m(&self) -> usize {
        self.side.m()
    }
    pub fn n(&self) -> usize {
        self.side.n()
    }
    pub fn a(&self) -> usize {
        self.side.a()
    }
    pub fn b(&self) -> usize {
        self.side.b()
    }
    pub fn rank(&self) -> usize {
        self.r
    }
    /// Core in the preprocessed basis.
    pub fn mstar(&self) -> &DMatrix<f64> {
        &self.mstar
    }
    /// `A` in `M* = A D Bᵀ`.
    pub fn core_left(&self) -> &DMatrix<f64> {
        &self.core_left
    }
    pub fn core_singular_values(&self) -> &DVector<f64> {
        &self.core_sv
    }
    /// `B` in `M* = A D Bᵀ`.
    pub fn core_right(&self) -> &DMatrix<f64> {
        &self.core_right
    }
    /// Ground truth `R = X M* Yᵀ`.
    pub fn ground_truth(&self) -> &DMatrix<f64> {
        &self.target
    }
    pub fn incoherence(&self) -> &IncoherenceReport {
        &self.incoherence
    }
    pub fn mstar_nuclear_norm(&self) -> f64 {
        self.core_sv.sum()
    }
    /// `‖R - X M* Yᵀ‖_F`, zero up to rounding.
    pub fn realizability_residual(&self) -> f64 {
        (&self.target - self.side.embed(&self.mstar)).norm()
    }
}

/// Observation noise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseSpec {
    #[default]
    None,
    Gaussian { sdv: f64 },
}

impl NoiseSpec {
    pub fn gaussian(sdv: f64) -> Self {
        if sdv > 0.0 {
            NoiseSpec::Gaussian { sdv }
        } else {
            NoiseSpec::None
        }
    }

    pub fn sdv(&self) -> f64 {
        match *self {
            NoiseSpec::None => 0.0,
            NoiseSpec::Gaussian { sdv } => sdv,
        }
    }
}

/// One sampled entry (0-based indices).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub i: u32,
    pub j: u32,
    pub value: f64,
}

/// Distinct observed position with its multiplicity and sample statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedEntry {
    pub i: u32,
    pub j: u32,
    pub count: u32,
    pub mean: f64,
    /// Sum of squared deviations from `mean`.
    pub m2: f64,
    pub min: f64,
    pub max: f64,
}

/// Multiset of sampled entries together with its aggregation.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    m: usize,
    n: usize,
    samples: Vec<Sample>,
    entries: Vec<ObservedEntry>,
}

const DENSE_AGGREGATION_LIMIT: usize = 1 << 24;

impl ObservationSet {
    pub fn from_samples(m: usize, n: usize, samples: Vec<Sample>) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(ImcError::InvalidArgument("matrix dimensions must be positive".into()));
        }
        if m > u32::MAX as usize || n > u32::MAX as usize {
            return Err(ImcError::InvalidArgument("dimensions exceed u32 range".into()));
        }
        for s in &samples {
            if s.i as usize >= m || s.j as usize >= n {
                return Err(ImcError::InvalidArgument(format!(
                    "sample ({}, {}) outside {}x{}",
                    s.i, s.j, m, n
                )));
            }
            if !s.value.is_finite() {
                return Err(ImcError::InvalidArgument(format!(
                    "non-finite value at ({}, {})",
                    s.i, s.j
                )));
            }
        }
        let entries = aggregate(m, n, &samples);
        Ok(ObservationSet { m, n, samples, entries })
    }

    pub fn m(&self) -> usize {
        self.m
    }
    pub fn n(&self) -> usize {
        self.n
    }
    /// Number of samples `N`, counting repeats.
    pub fn len(&self) -> usize {
        self.samples.len()
    }
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }
    /// Distinct positions sorted by `(i, j)`.
    pub fn entries(&self) -> &[ObservedEntry] {
        &self.entries
    }

    pub fn count(&self, i: usize, j: usize) -> u32 {
        self.entries
            .binary_search_by(|e| (e.i as usize, e.j as usize).cmp(&(i, j)))
            .map(|k| self.entries[k].count)
            .unwrap_or(0)
    }

    pub fn max_count(&self) -> u32 {
        self.entries.iter().map(|e| e.count).max().unwrap_or(0)
    }

    /// Smallest multiplicity over all `m·n` positions (zero unless every
    /// position was observed).
    pub fn min_count(&self) -> u32 {
        if self.entries.len() < self.m * self.n {
            0
        } else {
            self.entries.iter().map(|e| e.count).min().unwrap_or(0)
        }
    }

    pub fn mean_count(&self) -> f64 {
        self.len() as f64 / (self.m * self.n) as f64
    }

    /// Dense matrix of multiplicities `h_ij`.
    pub fn count_matrix(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.m, self.n);
        for e in &self.entries {
            h[(e.i as usize, e.j as usize)] = e.count as f64;
        }
        h
    }

    /// `Σ_k (v_k - mean_{i_k j_k})²`, the part of the squared loss that does
    /// not depend on the fit.
    pub fn within_entry_ss(&self) -> f64 {
        self.entries.iter().map(|e| e.m2).sum()
    }

    /// Observation set built from the samples at `idx`.
    pub fn subset(&self, idx: &[usize]) -> ObservationSet {
        let samples: Vec<Sample> = idx.iter().map(|&k| self.samples[k]).collect();
        let entries = aggregate(self.m, self.n, &samples);
        ObservationSet { m: self.m, n: self.n, samples, entries }
    }
}

fn aggregate(m: usize, n: usize, samples: &[Sample]) -> Vec<ObservedEntry> {
    let mut entries: Vec<ObservedEntry> = Vec::new();
    let mut slot_of = |lookup: &mut dyn FnMut(u32, u32) -> (usize, bool), s: &Sample| {
        let (k, fresh) = lookup(s.i, s.j);
        if fresh {
            entries.push(ObservedEntry {
                i: s.i,
                j: s.j,
                count: 0,
                mean: 0.0,
                m2: 0.0,
                min: f64::INFINITY,
                max: f64::NEG_INFINITY,
            });
        }
        let e = &mut entries[k];
        e.count += 1;
        let delta = s.value - e.mean;
        e.mean += delta / e.count as f64;
        e.m2 += delta * (s.value - e.mean);
        e.min = e.min.min(s.value);
        e.max = e.max.max(s.value);
    };
    if m * n <= DENSE_AGGREGATION_LIMIT {
        let mut slots = vec![u32::MAX; m * n];
        let mut next = 0u32;
        let mut lookup = |i: u32, j: u32| {
            let p = i as usize * n + j as usize;
            if slots[p] == u32::MAX {
                slots[p] = next;
                next += 1;
                (slots[p] as usize, true)
            } else {
                (slots[p] as usize, false)
            }
        };
        for s in samples {
            slot_of(&mut lookup, s);
        }
    } else {
        let mut slots: HashMap<(u32, u32), usize> = HashMap::new();
        let mut lookup = |i: u32, j: u32| {
            let len = slots.len();
            match slots.entry((i, j)) {
                std::collections::hash_map::Entry::Occupied(o) => (*o.get(), false),
                std::collections::hash_map::Entry::Vacant(v) => {
                    v.insert(len);
                    (len, true)
                }
            }
        };
        for s in samples {
            slot_of(&mut lookup, s);
        }
    }
    entries.sort_unstable_by_key(|e| (e.i, e.j));
    entries
}

/// Draw `n_samples` positions uniformly with replacement from an `m×n`
/// target and observe them under `noise`.
pub fn sample_from_matrix(
    target: &DMatrix<f64>,
    n_samples: usize,
    noise: NoiseSpec,
    seed: u64,
) -> Result<ObservationSet> {
    let (m, n) = target.shape();
    let mut rng = rng::seeded(seed);
    let sdv = noise.sdv();
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let i = rng.random_range(0..m as u32);
        let j = rng.random_range(0..n as u32);
        let mut value = target[(i as usize, j as usize)];
        if sdv > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            value += sdv * z;
        }
        samples.push(Sample { i, j, value });
    }
    ObservationSet::from_samples(m, n, samples)
}

/// Sample `N` entries of the instance's ground truth.
pub fn sample_observations(
    instance: &ProblemInstance,
    n_samples: usize,
    noise: NoiseSpec,
    seed: u64,
) -> Result<ObservationSet> {
    if let NoiseSpec::Gaussian { sdv } = noise {
        if !(sdv >= 0.0 && sdv.is_finite()) {
            return Err(ImcError::InvalidArgument(format!("invalid noise sdv {sdv}")));
        }
    }
    sample_from_matrix(instance.ground_truth(), n_samples, noise, seed)
}

/// Multiplicity statistics of an observation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplicityReport {
    pub n_samples: usize,
    pub distinct: usize,
    pub max_count: u32,
    pub min_count: u32,
    pub mean_count: f64,
    /// High-probability bound on the maximum multiplicity.
    pub tau5_bound: f64,
    /// Alternative bound valid when `N <= m·n`.
    pub tau5_tilde: Option<f64>,
    pub within_tau5: bool,
    /// Every position sampled at least once.
    pub coverage_ok: bool,
}

pub fn multiplicity_stats(obs: &ObservationSet, delta5: f64) -> Result<MultiplicityReport> {
    if !(delta5 > 0.0 && delta5 < 1.0) {
        return Err(ImcError::InvalidArgument(format!("delta5 must lie in (0, 1), got {delta5}")));
    }
    let (m, n, big_n) = (obs.m(), obs.n(), obs.len());
    let tau5_bound = bounds::tau5(big_n, m, n, delta5);
    let tau5_tilde = (big_n <= m * n).then(|| bounds::tau5_tilde(m, n, delta5));
    let max_count = obs.max_count();
    let limit = tau5_tilde.map_or(tau5_bound, |t| t.min(tau5_bound));
    Ok(MultiplicityReport {
        n_samples: big_n,
        distinct: obs.entries().len(),
        max_count,
        min_count: obs.min_count(),
        mean_count: obs.mean_count(),
        tau5_bound,
        tau5_tilde,
        within_tau5: (max_count as f64) <= limit,
        coverage_ok: obs.min_count() >= 1,
    })
}

/// Smallest `N` with `N >= 2 K m n log(N / (2 δ₂))`, which makes every
/// position appear at least `K` times with probability `1 - δ₂`.
pub fn coverage_sample_size(k: u32, m: usize, n: usize, delta2: f64) -> Result<u64> {
    if k == 0 || m == 0 || n == 0 || !(delta2 > 0.0 && delta2 < 1.0) {
        return Err(ImcError::InvalidArgument(
            "coverage needs K >= 1, positive dimensions and delta2 in (0, 1)".into(),
        ));
    }
    let c = 2.0 * k as f64 * (m * n) as f64;
    let rhs = |x: f64| c * (x / (2.0 * delta2)).ln();
    let mut big_n = c.max(1.0);
    for _ in 0..200 {
        let next = rhs(big_n).ceil();
        if next <= big_n {
            break;
        }
        big_n = next;
    }
    // The fixed point may overshoot; walk back to the smallest admissible N.
    let mut lo = c.floor().max(1.0);
    let mut hi = big_n;
    while lo < hi {
        let mid = ((lo + hi) / 2.0).floor();
        if mid >= rhs(mid) {
            hi = mid;
        } else {
            lo = mid + 1.0;
        }
    }
    Ok(hi as u64)
}
