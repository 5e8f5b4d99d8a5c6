//! Stopping-time estimation of the bad-query count from arrival positions.
//!
//! With the stream in uniformly random order, the number of good queries
//! seen before the T-th bad one is negative-hypergeometric, which makes the
//! stopping-time estimate `S (T-1) / (L-1)` unbiased for the total bad count.
//! The pmf and inverse-factorial-moment helpers exist to verify exactly that
//! and the associated variance bound.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Warm-up length: `ceil(ln(S)^2)`, clamped to at least 2.
///
/// Natural log; the asymptotics are base-invariant and this keeps the
/// warm-up a small fraction of the stream (22 of 100, 48 of 1000).
pub fn warmup_length(s: usize) -> Result<usize> {
    if s < 2 {
        return Err(Error::domain(format!(
            "stream length must be >= 2, got {s}"
        )));
    }
    let t = (s as f64).ln().powi(2).ceil() as usize;
    Ok(t.max(2))
}

/// Running estimate of the bad count after the b-th bad arrival at stream
/// position n: `S - n + 1` for b = 1, else `S (b-1) / (n-1)`.
pub fn running_estimate(s: usize, b: usize, n: usize) -> Result<f64> {
    if !(1 <= b && b <= n && n <= s) {
        return Err(Error::domain(format!(
            "need 1 <= b <= n <= S, got b={b}, n={n}, S={s}"
        )));
    }
    if b == 1 {
        Ok((s - n + 1) as f64)
    } else {
        Ok(s as f64 * (b - 1) as f64 / (n - 1) as f64)
    }
}

/// Locked stopping-time estimate once the T-th bad query arrives at
/// position L: `S (T-1) / (L-1)`. Unbiased under uniformly random order.
pub fn stopping_estimate(s: usize, t: usize, l: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::domain(format!(
            "warm-up count must be >= 2, got {t}"
        )));
    }
    if l < t {
        return Err(Error::domain(format!(
            "cannot see {t} bad queries within {l} arrivals"
        )));
    }
    Ok(s as f64 * (t - 1) as f64 / (l - 1) as f64)
}

fn ln_choose(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Negative hypergeometric pmf: probability of seeing exactly `g` good
/// queries before the `t`-th bad one, with `good` good queries among `s`.
/// Binomials are evaluated in log space so the pmf stays usable to S ~ 1e4.
/// Out-of-support `g` yields 0. Test oracle only; nothing samples from it.
pub fn nhg_pmf(s: u64, good: u64, t: u64, g: u64) -> Result<f64> {
    if good > s {
        return Err(Error::domain(format!(
            "good count {good} exceeds population {s}"
        )));
    }
    let bad = s - good;
    if t == 0 || bad < t {
        return Err(Error::domain(format!(
            "need 1 <= t <= bad count, got t={t}, bad={bad}"
        )));
    }
    if g > good {
        return Ok(0.0);
    }
    let ln_p = ln_choose(g + t - 1, g) + ln_choose(s - t - g, good - g) - ln_choose(s, good);
    Ok(ln_p.exp())
}

/// `E[(T-1)_k / (L-1)_k]` computed by summing over the pmf, where `(x)_k` is
/// the falling factorial. Equals `(B)_k / (S)_k` for 1 <= k < T; the tests
/// check the two routes against each other.
pub fn inverse_factorial_moment(s: u64, b: u64, t: u64, k: u32) -> Result<f64> {
    if b > s {
        return Err(Error::domain(format!(
            "bad count {b} exceeds population {s}"
        )));
    }
    if b < t {
        return Err(Error::domain(format!("need B >= T, got B={b}, T={t}")));
    }
    if !(1 <= k as u64 && (k as u64) < t) {
        return Err(Error::domain(format!("need 1 <= k < T, got k={k}, T={t}")));
    }
    let good = s - b;
    let falling = |x: f64, k: u32| -> f64 { (0..k).map(|i| x - i as f64).product() };
    let mut total = 0.0;
    for g in 0..=good {
        let l_minus_1 = (g + t - 1) as f64;
        let ratio = falling((t - 1) as f64, k) / falling(l_minus_1, k);
        total += ratio * nhg_pmf(s, good, t, g)?;
    }
    Ok(total)
}

/// Estimator state carried through one stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorState {
    /// Stream length.
    s: usize,
    /// Warm-up count.
    t: usize,
    /// Bad queries seen so far.
    bad_seen: usize,
    /// Stream position of the most recent observation.
    position: usize,
    /// Current estimate of the total bad count (0 before the first bad).
    b_hat: f64,
    /// Whether the b = T estimate has been locked.
    fixed: bool,
    /// Position of the T-th bad query, once seen.
    stop_position: Option<usize>,
}

impl EstimatorState {
    pub fn new(s: usize) -> Result<Self> {
        let t = warmup_length(s)?;
        Ok(EstimatorState {
            s,
            t,
            bad_seen: 0,
            position: 0,
            b_hat: 0.0,
            fixed: false,
            stop_position: None,
        })
    }

    pub fn warmup(&self) -> usize {
        self.t
    }

    pub fn bad_seen(&self) -> usize {
        self.bad_seen
    }

    pub fn estimate(&self) -> f64 {
        self.b_hat
    }

    pub fn is_fixed(&self) -> bool {
        self.fixed
    }

    pub fn stop_position(&self) -> Option<usize> {
        self.stop_position
    }

    /// Record a bad arrival at stream position `n` (1-based) and return the
    /// updated estimate. While b <= T the running estimate is refreshed;
    /// at b = T it locks and later arrivals leave it untouched.
    pub fn observe_bad(&mut self, n: usize) -> Result<f64> {
        if n <= self.position || n > self.s {
            return Err(Error::domain(format!(
                "positions must be increasing and within the stream, got {n}"
            )));
        }
        self.position = n;
        self.bad_seen += 1;
        if !self.fixed {
            self.b_hat = running_estimate(self.s, self.bad_seen, n)?;
            if self.bad_seen == self.t {
                self.fixed = true;
                self.stop_position = Some(n);
            }
        }
        Ok(self.b_hat)
    }

    /// Record a good arrival (positions advance, estimate untouched).
    pub fn observe_good(&mut self, n: usize) -> Result<()> {
        if n <= self.position || n > self.s {
            return Err(Error::domain(format!(
                "positions must be increasing and within the stream, got {n}"
            )));
        }
        self.position = n;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_reference_values() {
        assert_eq!(warmup_length(8).unwrap(), 5); // ceil(ln(8)^2) = ceil(4.324)
        assert_eq!(warmup_length(100).unwrap(), 22); // ceil(4.60517^2) = ceil(21.21)
        assert_eq!(warmup_length(2).unwrap(), 2); // ceil(0.48) = 1, clamped
        assert!(warmup_length(1).is_err());
        for s in 2..2000 {
            assert!(warmup_length(s).unwrap() >= 2);
        }
    }

    #[test]
    fn running_estimate_reference_values() {
        assert_eq!(running_estimate(10, 1, 1).unwrap(), 10.0);
        assert_eq!(running_estimate(100, 3, 11).unwrap(), 20.0);
        for b in 2..=10 {
            assert_eq!(running_estimate(100, b, b).unwrap(), 100.0);
        }
        assert!(running_estimate(10, 0, 1).is_err());
        assert!(running_estimate(10, 3, 2).is_err());
        assert!(running_estimate(10, 2, 11).is_err());
    }

    #[test]
    fn stopping_estimate_matches_running_at_lock() {
        assert_eq!(stopping_estimate(5, 2, 2).unwrap(), 5.0);
        for (s, t, l) in [(100, 5, 17), (50, 4, 31), (12, 3, 3)] {
            let a = stopping_estimate(s, t, l).unwrap();
            let b = running_estimate(s, t, l).unwrap();
            assert_eq!(a, b);
        }
        assert!(stopping_estimate(5, 3, 2).is_err());
        assert!(stopping_estimate(5, 1, 2).is_err());
    }

    /// Exhaustive enumeration over bad-position sets with exact integer
    /// arithmetic: every B-hat is S(T-1)/(L-1) with L-1 <= S-1, so scaling
    /// by lcm(1..=11) = 27720 makes all terms integers for S <= 12.
    fn enumerate_exact(s: usize, b: usize, t: usize) -> (i128, i128, Vec<usize>) {
        const SCALE: i128 = 27720;
        let mut ls = Vec::new();
        let mut sum_scaled: i128 = 0;
        let mut count: i128 = 0;
        // iterate over all B-subsets of {1..S} via bitmasks
        for mask in 0u32..(1 << s) {
            if mask.count_ones() as usize != b {
                continue;
            }
            let mut seen = 0;
            let mut l = 0;
            for pos in 1..=s {
                if mask & (1 << (pos - 1)) != 0 {
                    seen += 1;
                    if seen == t {
                        l = pos;
                        break;
                    }
                }
            }
            let numer = (s * (t - 1)) as i128 * SCALE;
            assert_eq!(numer % (l as i128 - 1), 0, "scale must clear denominator");
            sum_scaled += numer / (l as i128 - 1);
            count += 1;
            ls.push(l);
        }
        (sum_scaled, count * SCALE, ls)
    }

    #[test]
    fn stopping_estimate_unbiased_small_case() {
        // S=6, B=3, T=2: mean over all C(6,3)=20 subsets is exactly 3.
        let (sum_scaled, denom, ls) = enumerate_exact(6, 3, 2);
        assert_eq!(ls.len(), 20);
        assert_eq!(sum_scaled, 3 * denom);
    }

    #[test]
    fn stopping_estimate_variance_below_bound_small_case() {
        // S=6, B=3, T=3: enumerated variance must be under
        // S(T-1)/((S-1)(T-2)) * B(B-1) - B^2 = 5.4. (Exact value: 0.78.)
        let (s, b, t) = (6usize, 3usize, 3usize);
        let (_, _, ls) = enumerate_exact(s, b, t);
        let vals: Vec<f64> = ls
            .iter()
            .map(|&l| stopping_estimate(s, t, l).unwrap())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!((mean - 3.0).abs() < 1e-12);
        assert!((var - 0.78).abs() < 1e-12);
        let bound = (s * (t - 1)) as f64 / ((s - 1) * (t - 2)) as f64 * (b * (b - 1)) as f64
            - (b * b) as f64;
        assert!((bound - 5.4).abs() < 1e-12);
        assert!(var < bound);
    }

    #[test]
    fn nhg_pmf_reference_and_support() {
        // C(1,0) C(2,2) / C(4,2) = 1/6
        let p = nhg_pmf(4, 2, 2, 0).unwrap();
        assert!((p - 1.0 / 6.0).abs() < 1e-14);
        assert_eq!(nhg_pmf(8, 5, 2, 6).unwrap(), 0.0); // g > good
    }

    #[test]
    fn nhg_pmf_normalizes() {
        let (s, good, t) = (8u64, 5u64, 2u64);
        let total: f64 = (0..=good).map(|g| nhg_pmf(s, good, t, g).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_factorial_moment_reference_values() {
        let m1 = inverse_factorial_moment(10, 4, 3, 1).unwrap();
        assert!((m1 - 0.4).abs() < 1e-10);
        let m2 = inverse_factorial_moment(10, 4, 3, 2).unwrap();
        assert!((m2 - 2.0 / 15.0).abs() < 1e-10);
        // all-bad population: L = T always, ratio 1
        let all_bad = inverse_factorial_moment(10, 10, 3, 1).unwrap();
        assert!((all_bad - 1.0).abs() < 1e-12);
        assert!(inverse_factorial_moment(10, 4, 3, 3).is_err());
        assert!(inverse_factorial_moment(10, 2, 3, 1).is_err());
    }

    #[test]
    fn state_observes_and_locks() {
        // S=100 so T=22; feed bad arrivals at positions 1..=22.
        let mut st = EstimatorState::new(100).unwrap();
        assert_eq!(st.warmup(), 22);
        let mut last = 0.0;
        for n in 1..=22 {
            last = st.observe_bad(n).unwrap();
        }
        assert!(st.is_fixed());
        assert_eq!(st.stop_position(), Some(22));
        assert_eq!(last, 100.0); // all-bad prefix pins the estimate at S
                                 // further observations leave the locked estimate untouched
        st.observe_good(23).unwrap();
        let after = st.observe_bad(24).unwrap();
        assert_eq!(after, 100.0);
        assert_eq!(st.bad_seen(), 23);
    }

    #[test]
    fn state_rejects_non_increasing_positions() {
        let mut st = EstimatorState::new(10).unwrap();
        st.observe_bad(3).unwrap();
        assert!(st.observe_bad(3).is_err());
        assert!(st.observe_good(2).is_err());
        assert!(st.observe_bad(11).is_err());
    }
}
