//! Self-check suites exposed to the CLI: ledger fuzzing, smooth-allocation
//! budget soundness, and exact unbiasedness enumeration. Each returns a
//! one-line summary on success and an invariant error on the first
//! violation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::allocation::{split_budget, Allocator, SplitStrategy};
use crate::dp::{PrivacyLedger, PrivacyParams};
use crate::error::{Error, Result};

/// Random charge sequences against random caps: totals must always equal the
/// sum over accepted entries, never exceed the cap, and rejected charges
/// must leave the ledger untouched.
pub fn ledger_fuzz(trials: usize, seed: u64) -> Result<String> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    for trial in 0..trials {
        let cap_eps = rng.gen_range(0.1..4.0);
        let cap_delta = 10f64.powf(rng.gen_range(-6.0..-1.0));
        let mut ledger = PrivacyLedger::new(PrivacyParams::new(cap_eps, cap_delta)?);
        let charges = rng.gen_range(1..60);
        for i in 0..charges {
            let eps = rng.gen_range(0.0..cap_eps / 4.0);
            let delta = cap_delta * rng.gen_range(0.0..0.3);
            let before = (
                ledger.spent_epsilon(),
                ledger.spent_delta(),
                ledger.entries().len(),
            );
            match ledger.charge(format!("fuzz_{i}"), eps, delta) {
                Ok(()) => accepted += 1,
                Err(Error::BudgetExceeded { .. }) => {
                    rejected += 1;
                    let after = (
                        ledger.spent_epsilon(),
                        ledger.spent_delta(),
                        ledger.entries().len(),
                    );
                    if before != after {
                        return Err(Error::invariant(format!(
                            "trial {trial}: rejected charge mutated the ledger"
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
            if ledger.spent_epsilon() > cap_eps * (1.0 + 1e-12)
                || ledger.spent_delta() > cap_delta * (1.0 + 1e-12)
            {
                return Err(Error::invariant(format!(
                    "trial {trial}: ledger exceeded its cap"
                )));
            }
            let sum_eps: f64 = ledger.entries().iter().map(|e| e.epsilon).sum();
            if (ledger.spent_epsilon() - sum_eps).abs() > 1e-9 * sum_eps.max(1.0) {
                return Err(Error::invariant(format!(
                    "trial {trial}: totals diverged from the entry sum"
                )));
            }
        }
    }
    Ok(format!(
        "ledger fuzz: {trials} caps, {accepted} accepted / {rejected} rejected charges, all within cap"
    ))
}

/// Fuzzed smooth trajectories (arbitrary estimate sequences, bad counts up
/// to `max_bad`): the cumulative spend must stay strictly below the pool.
pub fn smooth_soundness_fuzz(trials: usize, max_bad: usize, seed: u64) -> Result<String> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let eps = rng.gen_range(0.05..4.0);
        let strat = SplitStrategy::ALL[rng.gen_range(0..4)];
        let plan = split_budget(eps, strat, true)?;
        let pool = plan.pool();
        let t = rng.gen_range(2..40);
        let mut alloc = Allocator::new(&plan, t)?;
        let b_total = rng.gen_range(1..=max_bad);
        let s_guess = (b_total * 2).max(4) as f64;
        let mut spent = 0.0;
        let mut b_hat: f64 = rng.gen_range(0.0..s_guess);
        for b in 1..=b_total {
            // adversarial estimate trajectory: random walks with jumps
            b_hat = match rng.gen_range(0..4) {
                0 => rng.gen_range(0.0..s_guess),
                1 => (b_hat + rng.gen_range(-3.0..3.0)).max(0.0),
                2 => 0.0,
                _ => s_guess,
            };
            let eps_b = alloc.smooth_next_epsilon(b_hat, b);
            if eps_b.is_nan() || eps_b <= 0.0 {
                return Err(Error::invariant(format!(
                    "trial {trial}: non-positive spend {eps_b} at b={b}"
                )));
            }
            spent += eps_b;
        }
        // the strict-inequality witness is the positive remainder; the
        // re-summed spend may round up to the pool by a few ulp once the
        // remainder shrinks past float resolution
        if alloc.pool_remaining() <= 0.0 || spent > pool * (1.0 + 1e-12) {
            return Err(Error::invariant(format!(
                "trial {trial}: spend {spent} reached pool {pool} after {b_total} queries"
            )));
        }
    }
    Ok(format!(
        "smooth soundness: {trials} fuzzed trajectories spent strictly under their pools"
    ))
}

/// Exact enumeration of the stopping-time estimate over every bad-position
/// set, in integer arithmetic: scaling by lcm(1..=11) = 27720 clears every
/// denominator (L - 1 <= 11 for S <= 12), so the mean check is exact.
pub fn unbiasedness_enumeration(max_s: usize) -> Result<String> {
    if max_s > 12 {
        return Err(Error::config("exact enumeration supports S <= 12"));
    }
    const SCALE: i128 = 27720;
    let mut cases = 0usize;
    for s in 4..=max_s {
        for t in 2..=4usize {
            for b in t..=s {
                let mut sum_scaled: i128 = 0;
                let mut count: i128 = 0;
                for mask in 0u32..(1 << s) {
                    if mask.count_ones() as usize != b {
                        continue;
                    }
                    let mut seen = 0usize;
                    let mut l = 0usize;
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
                    debug_assert_eq!(numer % (l as i128 - 1), 0);
                    sum_scaled += numer / (l as i128 - 1);
                    count += 1;
                }
                if sum_scaled != b as i128 * count * SCALE {
                    return Err(Error::invariant(format!(
                        "estimator biased at S={s}, B={b}, T={t}"
                    )));
                }
                cases += 1;
            }
        }
    }
    Ok(format!(
        "unbiasedness: exact mean equals B on all {cases} (S <= {max_s}, T <= 4) cases"
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_pristine_build() {
        ledger_fuzz(200, 1).unwrap();
        smooth_soundness_fuzz(200, 500, 2).unwrap();
        unbiasedness_enumeration(9).unwrap();
    }
}
