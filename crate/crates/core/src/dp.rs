//! Gaussian noise calibration (classical and analytic) and global
//! privacy-loss accounting by basic composition.
//!
//! The analytic calibration inverts the exact normal-CDF condition
//! `Phi(D/(2s) - es/D) - e^e * Phi(-D/(2s) - es/D) <= delta` for the smallest
//! noise scale `s`; the left side is monotone decreasing in `s`, so a
//! bracketed bisection is safe. The classical closed form is kept as an
//! upper-bound oracle; the engine always calibrates analytically.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An (epsilon, delta) privacy-loss pair. `epsilon > 0`, `delta` in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    epsilon: f64,
    delta: f64,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::domain(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::domain(format!(
                "delta must lie in (0, 1), got {delta}"
            )));
        }
        Ok(PrivacyParams { epsilon, delta })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Standard deviation of additive Gaussian noise, in count units.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct NoiseScale(f64);

impl NoiseScale {
    /// Zero is admitted for the noiseless test hook; calibrations always
    /// produce strictly positive scales.
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::domain(format!(
                "noise scale must be finite and >= 0, got {sigma}"
            )));
        }
        Ok(NoiseScale(sigma))
    }

    pub fn sigma(&self) -> f64 {
        self.0
    }

    pub fn variance(&self) -> f64 {
        self.0 * self.0
    }
}

/// Standard normal CDF via the complementary error function (~1e-15 accuracy).
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-t / std::f64::consts::SQRT_2)
}

/// log of the standard normal CDF for far-left tails, via the Mills-ratio
/// asymptotic series. Only called for t <= -30, where the series error is
/// below 1e-10 relative.
fn ln_normal_cdf_tail(t: f64) -> f64 {
    debug_assert!(t <= -30.0);
    let z = -t;
    let z2 = z * z;
    let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
    -0.5 * z2 - (z * (2.0 * std::f64::consts::PI).sqrt()).ln() + series.ln()
}

/// Classical Gaussian calibration: `sigma = D * sqrt(2 ln(1.25/delta)) / eps`.
///
/// The closed form is only proven for `eps` in (0, 1); larger values are
/// accepted but logged, since this function serves as a loose upper bound.
pub fn classic_gaussian_sigma(l2_sensitivity: f64, params: &PrivacyParams) -> Result<NoiseScale> {
    if !(l2_sensitivity > 0.0 && l2_sensitivity.is_finite()) {
        return Err(Error::domain(format!(
            "l2 sensitivity must be positive, got {l2_sensitivity}"
        )));
    }
    if params.epsilon >= 1.0 {
        log::warn!(
            "classical Gaussian calibration called with eps = {} >= 1; \
             the closed form is only valid on (0, 1)",
            params.epsilon
        );
    }
    let sigma = l2_sensitivity * (2.0 * (1.25 / params.delta).ln()).sqrt() / params.epsilon;
    NoiseScale::new(sigma)
}

/// Left side of the analytic Gaussian condition at noise scale `sigma`.
/// Exposed so tests and the verifier can check calibrations independently.
///
/// The `e^eps * Phi(b)` term is evaluated in log space once `b` is deep in
/// the left tail; the direct product would hit `inf * 0` for very large
/// epsilon even though the true value is bounded by `1/sqrt(4 pi eps)`.
pub fn agm_privacy_profile(l2_sensitivity: f64, epsilon: f64, sigma: f64) -> f64 {
    let a = l2_sensitivity / (2.0 * sigma) - epsilon * sigma / l2_sensitivity;
    let b = -l2_sensitivity / (2.0 * sigma) - epsilon * sigma / l2_sensitivity;
    let second = if b > -30.0 {
        epsilon.exp() * normal_cdf(b)
    } else {
        (epsilon + ln_normal_cdf_tail(b)).exp()
    };
    normal_cdf(a) - second
}

/// Absolute bisection tolerance on sigma, relative to the sensitivity.
const AGM_TOL: f64 = 1e-9;
/// Starting bracket for the bisection, relative to the sensitivity.
const AGM_BRACKET_LO: f64 = 1e-6;
const AGM_BRACKET_HI: f64 = 1e6;
/// Hard ceiling when the upper bracket has to be extended (tiny epsilon).
const AGM_BRACKET_MAX: f64 = 1e30;

/// Analytic Gaussian calibration: the smallest `sigma` satisfying the exact
/// CDF condition, found by bisection. Monotone decreasing in `eps` and
/// `delta`; homogeneous of degree 1 in the sensitivity.
pub fn agm_sigma(l2_sensitivity: f64, params: &PrivacyParams) -> Result<NoiseScale> {
    if !(l2_sensitivity > 0.0 && l2_sensitivity.is_finite()) {
        return Err(Error::domain(format!(
            "l2 sensitivity must be positive, got {l2_sensitivity}"
        )));
    }
    let d = l2_sensitivity;
    let (eps, delta) = (params.epsilon, params.delta);

    let mut lo = AGM_BRACKET_LO * d;
    let mut hi = AGM_BRACKET_HI * d;
    if agm_privacy_profile(d, eps, lo) <= delta {
        // Already private at the bottom of the bracket; the scan below only
        // shrinks, so return the smallest representable candidate.
        lo = 0.0;
    }
    // For very small eps the sigma root can sit above the standard bracket;
    // extend by doubling until the condition flips.
    while agm_privacy_profile(d, eps, hi) > delta {
        hi *= 2.0;
        if hi > AGM_BRACKET_MAX * d {
            return Err(Error::Calibration(format!(
                "analytic Gaussian root not bracketed for eps={eps}, delta={delta}, \
                 sensitivity={d}"
            )));
        }
    }

    let tol = AGM_TOL * d;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break; // float resolution exhausted
        }
        if agm_privacy_profile(d, eps, mid) <= delta {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    NoiseScale::new(hi)
}

/// Mean-zero Gaussian draw at the given scale. A zero scale yields exactly
/// zero without consuming randomness.
pub fn sample_gaussian<R: Rng + ?Sized>(scale: NoiseScale, rng: &mut R) -> f64 {
    if scale.sigma() == 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, scale.sigma()).expect("valid noise scale");
    normal.sample(rng)
}

/// Compensated (Kahan) running sum, so that ledger totals honour the 1e-12
/// relative slack even across thousands of entries.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    fn add(&mut self, x: f64) {
        let y = x - self.compensation;
        let t = self.sum + y;
        self.compensation = (t - self.sum) - y;
        self.sum = t;
    }

    fn with(mut self, x: f64) -> Self {
        self.add(x);
        self
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

/// One accepted charge against the ledger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub label: String,
    pub epsilon: f64,
    pub delta: f64,
}

/// Relative slack permitted on cap checks, covering float accumulation.
const LEDGER_REL_SLACK: f64 = 1e-12;

/// Running (epsilon, delta) expenditure under basic composition with a hard
/// global cap; a charge is accepted only if both new totals stay within it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyLedger {
    cap: PrivacyParams,
    eps_total: KahanSum,
    delta_total: KahanSum,
    entries: Vec<LedgerEntry>,
}

impl PrivacyLedger {
    pub fn new(cap: PrivacyParams) -> Self {
        PrivacyLedger {
            cap,
            eps_total: KahanSum::default(),
            delta_total: KahanSum::default(),
            entries: Vec::new(),
        }
    }

    pub fn cap(&self) -> &PrivacyParams {
        &self.cap
    }

    pub fn spent_epsilon(&self) -> f64 {
        self.eps_total.value()
    }

    pub fn spent_delta(&self) -> f64 {
        self.delta_total.value()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    fn fits(total: f64, cap: f64) -> bool {
        total <= cap * (1.0 + LEDGER_REL_SLACK)
    }

    /// Whether a prospective charge would be accepted.
    pub fn can_absorb(&self, eps: f64, delta: f64) -> bool {
        eps >= 0.0
            && delta >= 0.0
            && Self::fits(self.eps_total.with(eps).value(), self.cap.epsilon())
            && Self::fits(self.delta_total.with(delta).value(), self.cap.delta())
    }

    /// Append a charge; on rejection the ledger is unchanged.
    pub fn charge(&mut self, label: impl Into<String>, eps: f64, delta: f64) -> Result<()> {
        let label = label.into();
        let well_formed = |v: f64| v.is_finite() && v >= 0.0;
        if !well_formed(eps) || !well_formed(delta) {
            return Err(Error::domain(format!(
                "charge '{label}' must be nonnegative and finite, got ({eps}, {delta})"
            )));
        }
        let new_eps = self.eps_total.with(eps);
        let new_delta = self.delta_total.with(delta);
        if !Self::fits(new_eps.value(), self.cap.epsilon())
            || !Self::fits(new_delta.value(), self.cap.delta())
        {
            return Err(Error::BudgetExceeded {
                label,
                attempted_eps: new_eps.value(),
                attempted_delta: new_delta.value(),
                cap_eps: self.cap.epsilon(),
                cap_delta: self.cap.delta(),
            });
        }
        self.eps_total = new_eps;
        self.delta_total = new_delta;
        self.entries.push(LedgerEntry {
            label,
            epsilon: eps,
            delta,
        });
        Ok(())
    }
}
