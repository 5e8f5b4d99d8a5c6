//! Cross-module invariants: calibration dominance and homogeneity, ledger
//! and allocator safety under generated inputs, estimator identities, the
//! asymptotic variance scaling, and the utility-shape bound.

use lapras_core::allocation::{split_budget, Allocator, SplitStrategy};
use lapras_core::baselines::offline_mm;
use lapras_core::dp::{agm_sigma, classic_gaussian_sigma, PrivacyLedger, PrivacyParams};
use lapras_core::engine::{process_stream, EngineConfig, PredictionSet};
use lapras_core::error::Error;
use lapras_core::estimator::{running_estimate, stopping_estimate, warmup_length};
use lapras_core::workload::range_universe;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[test]
fn agm_dominates_classical_on_grid() {
    // 10 x 10 x 3 = 300 grid points across eps in (0,1), delta in
    // (1e-8, 1e-2), sensitivity in {0.5, 1, 2}
    let mut points = 0;
    for i in 0..10 {
        let eps = 0.05 + 0.90 * (i as f64 / 9.0);
        for j in 0..10 {
            let delta = 10f64.powf(-8.0 + 6.0 * (j as f64 / 9.0));
            let params = PrivacyParams::new(eps, delta).unwrap();
            for d in [0.5, 1.0, 2.0] {
                let analytic = agm_sigma(d, &params).unwrap().sigma();
                let classical = classic_gaussian_sigma(d, &params).unwrap().sigma();
                assert!(
                    analytic <= classical,
                    "eps={eps} delta={delta} d={d}: {analytic} > {classical}"
                );
                points += 1;
            }
        }
    }
    assert!(points >= 100);
}

#[test]
fn agm_homogeneous_in_sensitivity() {
    for (eps, delta) in [(0.3, 1e-6), (0.9, 1e-4), (2.0, 1e-3)] {
        let params = PrivacyParams::new(eps, delta).unwrap();
        let unit = agm_sigma(1.0, &params).unwrap().sigma();
        for c in [0.5, 3.0] {
            let scaled = agm_sigma(c, &params).unwrap().sigma();
            assert!(
                (scaled - c * unit).abs() / (c * unit) < 1e-9 + 1e-9 / unit,
                "c={c}: {scaled} vs {}",
                c * unit
            );
        }
    }
}

#[test]
fn running_estimate_matches_stopping_estimate_at_lock() {
    for s in [5usize, 12, 40, 100, 731] {
        let t = warmup_length(s).unwrap();
        for l in t..=s {
            let a = running_estimate(s, t, l).unwrap();
            let b = stopping_estimate(s, t, l).unwrap();
            assert_eq!(a, b, "S={s} T={t} L={l}");
        }
    }
}

#[test]
fn estimator_variance_scales_with_log_squared() {
    // Var(B-hat) * ln(S)^2 / B^2 stays bounded by a small constant
    for s in [1000usize, 10_000] {
        let b = s / 4;
        let t = warmup_length(s).unwrap();
        let trials = 10_000;
        let mut rng = ChaCha12Rng::seed_from_u64(s as u64);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..trials {
            let mut positions: Vec<usize> = rand::seq::index::sample(&mut rng, s, b)
                .into_iter()
                .collect();
            let (_, &mut lth, _) = positions.select_nth_unstable(t - 1);
            let est = stopping_estimate(s, t, lth + 1).unwrap();
            sum += est;
            sum_sq += est * est;
        }
        let mean = sum / trials as f64;
        let var = sum_sq / trials as f64 - mean * mean;
        let normalized = var * (s as f64).ln().powi(2) / (b * b) as f64;
        assert!(
            normalized <= 4.0,
            "S={s}: normalized variance {normalized} above the constant"
        );
    }
}

#[test]
fn utility_shape_on_fully_predicted_streams() {
    // on rho = 1 streams the total squared error stays within
    // (eps / eps_mm)^2 * 1.1 of the clairvoyant batch run
    let n = 16;
    let x = lapras_core::fixtures::synthetic_histogram(n, 800.0, 5).unwrap();
    let universe = range_universe(n).unwrap();
    let queries: Vec<_> = universe.queries.iter().take(20).cloned().collect();
    let p = PredictionSet::new(queries.clone());
    let (eps, delta) = (1.0, 1e-3);
    let s = queries.len();
    let plan = split_budget(eps, SplitStrategy::MatrixHeavy, true)
        .unwrap()
        .with_delta_i(delta / (s + 1) as f64);
    let config = EngineConfig::default();
    let mut lapras_total = 0.0;
    let mut offline_total = 0.0;
    for trial in 0..200u64 {
        let mut stream = queries.clone();
        stream.shuffle(&mut ChaCha12Rng::seed_from_u64(900 + trial));
        let run = process_stream(
            &stream,
            &x,
            &p,
            &plan,
            &config,
            &mut ChaCha12Rng::seed_from_u64(7000 + trial),
        )
        .unwrap();
        for (o, r) in run.outcomes.iter().zip(&run.trace.records) {
            let v = o.value().expect("rho=1 answers everything");
            lapras_total += (v - r.true_answer) * (v - r.true_answer);
        }
        let base = offline_mm(
            &stream,
            &x,
            eps,
            delta,
            &config.strategy,
            &mut ChaCha12Rng::seed_from_u64(90_000 + trial),
        )
        .unwrap();
        for (a, q) in base.answers.iter().zip(&stream) {
            let t = x.answer(q);
            offline_total += (a - t) * (a - t);
        }
    }
    let c = (eps / plan.eps_mm).powi(2) * 1.1;
    assert!(
        lapras_total <= c * offline_total,
        "total squared error {lapras_total} above {c} x offline {offline_total}"
    );
}

proptest! {
    #[test]
    fn ledger_cap_holds_under_arbitrary_charges(
        cap_eps in 0.1f64..5.0,
        charges in prop::collection::vec((0.0f64..1.0, 0.0f64..5e-4), 1..60),
    ) {
        let cap_delta = 1e-2;
        let mut ledger =
            PrivacyLedger::new(PrivacyParams::new(cap_eps, cap_delta).unwrap());
        for (i, (eps, delta)) in charges.iter().enumerate() {
            match ledger.charge(format!("c{i}"), *eps, *delta) {
                Ok(()) | Err(Error::BudgetExceeded { .. }) => {}
                Err(e) => return Err(TestCaseError::fail(format!("unexpected error {e}"))),
            }
            prop_assert!(ledger.spent_epsilon() <= cap_eps * (1.0 + 1e-12));
            prop_assert!(ledger.spent_delta() <= cap_delta * (1.0 + 1e-12));
        }
        let sum_eps: f64 = ledger.entries().iter().map(|e| e.epsilon).sum();
        let sum_delta: f64 = ledger.entries().iter().map(|e| e.delta).sum();
        prop_assert!((ledger.spent_epsilon() - sum_eps).abs() <= 1e-9 * (1.0 + sum_eps));
        prop_assert!((ledger.spent_delta() - sum_delta).abs() <= 1e-9 * (1.0 + sum_delta));
    }

    #[test]
    fn smooth_spending_stays_inside_pool(
        eps in 0.05f64..4.0,
        estimates in prop::collection::vec(0.0f64..500.0, 1..200),
    ) {
        let plan = split_budget(eps, SplitStrategy::Equal, true).unwrap();
        let mut alloc = Allocator::new(&plan, 5).unwrap();
        let mut spent = 0.0;
        for (i, b_hat) in estimates.iter().enumerate() {
            let eps_b = alloc.smooth_next_epsilon(*b_hat, i + 1);
            prop_assert!(eps_b > 0.0);
            spent += eps_b;
        }
        prop_assert!(alloc.pool_remaining() > 0.0);
        prop_assert!(spent <= plan.pool() * (1.0 + 1e-12));
    }

    #[test]
    fn smooth_spend_is_monotone_in_estimate(
        b in 1usize..100,
        lo in 0.0f64..200.0,
        delta in 0.0f64..100.0,
    ) {
        let plan = split_budget(1.0, SplitStrategy::QueryHeavy, true).unwrap();
        let base = Allocator::new(&plan, 10).unwrap();
        let mut a = base.clone();
        let mut b_alloc = base.clone();
        let eps_lo = a.smooth_next_epsilon(lo, b);
        let eps_hi = b_alloc.smooth_next_epsilon(lo + delta, b);
        prop_assert!(eps_hi <= eps_lo + 1e-15);
    }

    #[test]
    fn reserve_total_never_exceeds_reserve(
        eps in 0.1f64..4.0,
        draws in 1usize..40,
    ) {
        let plan = split_budget(eps, SplitStrategy::ReserveHeavy, false)
            .unwrap()
            .with_eps_min(1e-9 * eps);
        let reserve = plan.eps_reserve;
        let mut alloc = Allocator::new(&plan, 3).unwrap();
        let mut total = 0.0;
        for _ in 0..draws {
            match alloc.reserve_draw() {
                Some(eps_b) => total += eps_b,
                None => break,
            }
        }
        prop_assert!(total < reserve);
    }
}
