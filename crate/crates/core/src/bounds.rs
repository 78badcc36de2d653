//! Closed-form sample-complexity and generalisation bounds.
//!
//! All logarithms are natural.

use serde::{Deserialize, Serialize};

use crate::error::{ImcError, Result};
use crate::model::SideInfoPair;

/// Optional split of the failure probability `Δ` into `δ₀, δ₁, δ₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaSplit {
    pub delta0: f64,
    pub delta1: f64,
    pub delta2: f64,
}

/// Parameters shared by the bound calculators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    pub m: usize,
    pub n: usize,
    pub a: usize,
    pub b: usize,
    pub r: usize,
    pub mu: f64,
    /// Joint incoherence; `μ̄²μ²r` is used when absent.
    #[serde(default)]
    pub mu1: Option<f64>,
    /// Core incoherence `μ̄`; defaults to `mu`.
    #[serde(default)]
    pub mu_bar: Option<f64>,
    pub sigma0: f64,
    #[serde(default)]
    pub sdv: f64,
    #[serde(rename = "Delta", alias = "delta")]
    pub delta: f64,
    #[serde(rename = "C", alias = "c", default = "one")]
    pub c: f64,
    #[serde(default = "one")]
    pub loss_lipschitz: f64,
    #[serde(default = "one")]
    pub loss_bound: f64,
    #[serde(default)]
    pub delta_split: Option<DeltaSplit>,
}

fn one() -> f64 {
    1.0
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(ImcError::InvalidArgument(msg.to_string()));
        if self.m == 0 || self.n == 0 || self.a == 0 || self.b == 0 || self.r == 0 {
            return bad("m, n, a, b, r must be positive");
        }
        if !(self.mu > 0.0) || self.mu1.is_some_and(|v| !(v > 0.0)) || self.mu_bar.is_some_and(|v| !(v > 0.0)) {
            return bad("incoherence constants must be positive");
        }
        if !(self.sigma0 > 0.0 && self.sigma0 <= 1.0) {
            return bad("sigma0 must lie in (0, 1]");
        }
        if !(self.sdv >= 0.0 && self.sdv.is_finite()) {
            return bad("sdv must be non-negative");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("Delta must lie in (0, 1)");
        }
        if !(self.c >= 1.0) {
            return bad("C must be at least 1");
        }
        if !(self.loss_lipschitz >= 0.0 && self.loss_bound >= 0.0) {
            return bad("loss constants must be non-negative");
        }
        if let Some(s) = self.delta_split {
            for d in [s.delta0, s.delta1, s.delta2] {
                if !(d > 0.0 && d < 1.0) {
                    return bad("delta split entries must lie in (0, 1)");
                }
            }
        }
        Ok(())
    }

    pub fn mu1_or_surrogate(&self) -> f64 {
        self.mu1.unwrap_or_else(|| self.mu1_surrogate())
    }

    /// `μ̄² μ² r`.
    pub fn mu1_surrogate(&self) -> f64 {
        let mb = self.mu_bar.unwrap_or(self.mu);
        mb * mb * self.mu * self.mu * self.r as f64
    }

    pub fn split(&self) -> DeltaSplit {
        self.delta_split.unwrap_or(DeltaSplit {
            delta0: self.delta / 9.0,
            delta1: self.delta / 9.0,
            delta2: self.delta / 9.0,
        })
    }

    fn mn(&self) -> f64 {
        (self.m * self.n) as f64
    }
}

/// `N/(mn) + (8/3) log(2mn/δ₅) √(N/(mn))`.
pub fn tau5(n_samples: usize, m: usize, n: usize, delta5: f64) -> f64 {
    let ratio = n_samples as f64 / (m * n) as f64;
    ratio + 8.0 / 3.0 * (2.0 * (m * n) as f64 / delta5).ln() * ratio.sqrt()
}

/// `5 log(2mn/δ₅)`, valid when `N <= mn`.
pub fn tau5_tilde(m: usize, n: usize, delta5: f64) -> f64 {
    5.0 * (2.0 * (m * n) as f64 / delta5).ln()
}

/// `δ = (Δ / 2K₁) / log(K₁K₂/Δ)`, for which `K₁ δ log(K₂/δ) <= Δ`.
pub fn delta_conversion(delta: f64, k1: f64, k2: f64) -> f64 {
    let d = (delta / (2.0 * k1)) / (k1 * k2 / delta).ln();
    debug_assert!(delta_guarantee_holds(delta, k1, k2, d));
    d
}

/// `K₁ δ log(K₂/δ) <= Δ`, with a relative slack of `1e-12` for rounding.
pub fn delta_guarantee_holds(delta: f64, k1: f64, k2: f64, d: f64) -> bool {
    k1 * d * (k2 / d).ln() <= delta * (1.0 + 1e-12)
}

/// `x = 2y log y`, for which `x / log x >= y`.
pub fn inverse_x_over_log_x(y: f64) -> f64 {
    2.0 * y * y.ln()
}

/// `(128/3) μ μ₁ σ₀⁻⁴ r (a+b) log(2mn/δ)`.
pub fn tbar(mu: f64, mu1: f64, sigma0: f64, r: usize, a: usize, b: usize, m: usize, n: usize, delta: f64) -> f64 {
    128.0 / 3.0 * mu * mu1 * sigma0.powi(-4) * (r * (a + b)) as f64 * (2.0 * (m * n) as f64 / delta).ln()
}

/// `8 log(σ₀⁻¹) + 2 log a + 4 + log τ`: the number of golfing batches.
pub fn golfing_q0(sigma0: f64, a: usize, tau: f64) -> f64 {
    8.0 * (1.0 / sigma0).ln() + 2.0 * (a as f64).ln() + 4.0 + tau.ln()
}

/// `log[e⁶ σ₀⁻⁸ a log(mn/δ)]`.
pub fn explicit_q(sigma0: f64, a: usize, m: usize, n: usize, delta: f64) -> f64 {
    6.0 - 8.0 * sigma0.ln() + (a as f64).ln() + ((m * n) as f64 / delta).ln().ln()
}

/// `δ` used for exact recovery at overall failure probability `Δ`.
pub fn exact_recovery_delta(delta_big: f64, sigma0: f64, a: usize, m: usize, n: usize) -> f64 {
    let first = delta_conversion(delta_big / 3.0, 5.0, (m * n) as f64);
    let second = delta_big / (3.0 * (1.0 + 5.0 * (6.0 - 8.0 * sigma0.ln() + (a as f64).ln())));
    first.min(second)
}

/// Exact-recovery thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    /// `μ⁵ r² (a+b) σ₀⁻⁴ log(mn/Δ)`: surrogate, constants suppressed.
    pub n_star_tilde: f64,
    /// `q₀ · T̄`.
    pub n_star_explicit: f64,
    /// `log[e⁶ σ₀⁻⁸ a log(mn/δ)]`.
    pub q0: f64,
    pub tbar: f64,
    /// `δ` derived from `Δ`.
    pub delta: f64,
    pub mu1_used: f64,
}

pub fn exact_recovery_threshold(p: &BoundParams) -> Result<ThresholdReport> {
    p.validate()?;
    let delta = exact_recovery_delta(p.delta, p.sigma0, p.a, p.m, p.n);
    let mu1 = p.mu1_or_surrogate();
    let t = tbar(p.mu, mu1, p.sigma0, p.r, p.a, p.b, p.m, p.n, delta);
    let q0 = explicit_q(p.sigma0, p.a, p.m, p.n, delta);
    let r = p.r as f64;
    let n_star_tilde = p.mu.powi(5) * r * r * (p.a + p.b) as f64 * p.sigma0.powi(-4) * (p.mn() / p.delta).ln();
    Ok(ThresholdReport {
        n_star_tilde,
        n_star_explicit: q0 * t,
        q0,
        tbar: t,
        delta,
        mu1_used: mu1,
    })
}

/// Loss class for [`generalization_bound`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundVariant {
    BoundedLoss,
    AbsoluteLoss,
}

/// Constituents of a generalisation bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    /// Everything multiplying `√(1/N)` in the leading term.
    pub prefactor: f64,
    /// `√(1/N)`.
    pub rate: f64,
    pub leading: f64,
    /// `B_ℓ · 4 log(1/δ₁) / (3N)`; zero for the absolute loss.
    pub tail: f64,
    pub total: f64,
}

/// `θ = 2 log(N/2δ₂) + (8/3) log(2mn/δ₂) √(2 log(N/2δ₂))`.
pub fn theta(n_samples: usize, m: usize, n: usize, delta2: f64) -> f64 {
    let l = (n_samples as f64 / (2.0 * delta2)).ln();
    2.0 * l + 8.0 / 3.0 * (2.0 * (m * n) as f64 / delta2).ln() * (2.0 * l).sqrt()
}

/// `Θ = 2 log(Nmn/δ₂²) log(2N/δ₀) log(1/δ₁)`.
pub fn big_theta(n_samples: usize, m: usize, n: usize, split: DeltaSplit) -> f64 {
    let nn = n_samples as f64;
    2.0 * (nn * (m * n) as f64 / (split.delta2 * split.delta2)).ln()
        * (2.0 * nn / split.delta0).ln()
        * (1.0 / split.delta1).ln()
}

pub fn generalization_terms(p: &BoundParams, n_samples: usize, variant: BoundVariant) -> Result<BoundTerms> {
    p.validate()?;
    if n_samples == 0 {
        return Err(ImcError::InvalidArgument("N must be at least 1".into()));
    }
    let s = p.split();
    let nn = n_samples as f64;
    let shape = (p.a as f64).powf(1.5) * (p.b as f64).sqrt() * p.mu * p.sigma0.powi(-2) * p.sdv;
    let rate = (1.0 / nn).sqrt();
    let (prefactor, tail) = match variant {
        BoundVariant::BoundedLoss => {
            let th = theta(n_samples, p.m, p.n, s.delta2);
            let pre = 500.0
                * p.c
                * p.loss_lipschitz
                * shape
                * th.sqrt()
                * (2.0 * nn / s.delta0).ln()
                * (nn / (2.0 * s.delta2)).ln().sqrt();
            (pre, p.loss_bound * 4.0 * (1.0 / s.delta1).ln() / (3.0 * nn))
        }
        BoundVariant::AbsoluteLoss => {
            let pre = 700.0 * p.c * shape * big_theta(n_samples, p.m, p.n, s);
            (pre, 0.0)
        }
    };
    let leading = prefactor * rate;
    Ok(BoundTerms { prefactor, rate, leading, tail, total: leading + tail })
}

/// Explicit generalisation bound at sample size `N`.
pub fn generalization_bound(p: &BoundParams, n_samples: usize, variant: BoundVariant) -> Result<f64> {
    Ok(generalization_terms(p, n_samples, variant)?.total)
}

/// `‖Xᵀ‖_{2,∞} ‖Yᵀ‖_{2,∞} 𝓜 √(1/N)`.
pub fn rademacher_bound(side: &SideInfoPair, m_norm: f64, n_samples: usize) -> Result<f64> {
    if !(m_norm >= 0.0) || n_samples == 0 {
        return Err(ImcError::InvalidArgument("need Mnorm >= 0 and N >= 1".into()));
    }
    let x = crate::linalg::max_row_norm_sq(side.x()).sqrt();
    let y = crate::linalg::max_row_norm_sq(side.y()).sqrt();
    Ok(x * y * m_norm / (n_samples as f64).sqrt())
}

/// `max(√(L·M), L·M)` with `L = (8/3) log((m+n)/δ)`: the tangent-space
/// deviation bound with `M = r μ² (a+b) / N`.
pub fn tangent_deviation_bound(r: usize, mu: f64, a: usize, b: usize, m: usize, n: usize, n_samples: usize, delta: f64) -> f64 {
    let arg = 8.0 / 3.0 * ((m + n) as f64 / delta).ln() * r as f64 * mu * mu * (a + b) as f64 / n_samples as f64;
    arg.sqrt().max(arg)
}

/// Complement analogue with `M = μ² (ab + r²) / N`.
pub fn complement_deviation_bound(r: usize, mu: f64, a: usize, b: usize, m: usize, n: usize, n_samples: usize, delta: f64) -> f64 {
    let arg = 8.0 / 3.0 * ((m + n) as f64 / delta).ln() * mu * mu * (a * b + r * r) as f64 / n_samples as f64;
    arg.sqrt().max(arg)
}

/// `[νσ₀²/(C√(aN)), νσ₀²/√(aN), Cνσ₀²/√(aN)]`: the admissible λ window.
pub fn lambda_window(sdv: f64, sigma0: f64, a: usize, n_samples: usize, c: f64) -> (f64, f64, f64) {
    let mid = sdv * sigma0 * sigma0 / ((a * n_samples) as f64).sqrt();
    (mid / c, mid, c * mid)
}
