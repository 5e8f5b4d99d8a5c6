//! Budget splitting and the per-bad-query spending policies.
//!
//! The global budget is partitioned four ways (matrix release, warm-up,
//! paced bad-query pool, reserve). Static allocation divides the warm-up and
//! paced pools uniformly against the locked estimate; Smooth allocation
//! merges the two middle components into one pool and equidistributes the
//! remainder over the projected residual bad count on every spend, which
//! keeps the cumulative spend strictly inside the pool no matter what
//! estimates it is fed. The reserve is spent in halving increments and the
//! policy halts once it falls below the floor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named budget splits. Fractions of the global epsilon assigned to
/// (matrix release, warm-up, paced pool, reserve).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    Equal,
    MatrixHeavy,
    QueryHeavy,
    ReserveHeavy,
}

impl SplitStrategy {
    pub const ALL: [SplitStrategy; 4] = [
        SplitStrategy::Equal,
        SplitStrategy::MatrixHeavy,
        SplitStrategy::QueryHeavy,
        SplitStrategy::ReserveHeavy,
    ];

    pub fn fractions(&self) -> [f64; 4] {
        match self {
            SplitStrategy::Equal => [0.25, 0.25, 0.25, 0.25],
            SplitStrategy::MatrixHeavy => [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0],
            SplitStrategy::QueryHeavy => [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            SplitStrategy::ReserveHeavy => [1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 0.5],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SplitStrategy::Equal => "equal",
            SplitStrategy::MatrixHeavy => "matrix_heavy",
            SplitStrategy::QueryHeavy => "query_heavy",
            SplitStrategy::ReserveHeavy => "reserve_heavy",
        }
    }
}

impl std::str::FromStr for SplitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal" => Ok(SplitStrategy::Equal),
            "matrix_heavy" => Ok(SplitStrategy::MatrixHeavy),
            "query_heavy" => Ok(SplitStrategy::QueryHeavy),
            "reserve_heavy" => Ok(SplitStrategy::ReserveHeavy),
            other => Err(Error::config(format!("unknown split strategy '{other}'"))),
        }
    }
}

/// Fraction of the global epsilon used as the default halt threshold.
const DEFAULT_EPS_MIN_FRACTION: f64 = 1e-4;

/// The four-way budget split plus the per-release delta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub eps_mm: f64,
    pub eps_bad_init: f64,
    pub eps_bad: f64,
    pub eps_reserve: f64,
    /// Halt threshold for the reserve.
    pub eps_min: f64,
    /// Per-release delta (delta / (S+1)); set by the caller once S is known.
    pub delta_i: f64,
    /// Whether the warm-up and paced components are merged into one pool.
    pub smooth: bool,
}

/// Split a global epsilon per the named strategy. `delta_i` starts at zero
/// and must be set via [`BudgetPlan::with_delta_i`] before running a stream.
pub fn split_budget(eps: f64, strat: SplitStrategy, smooth: bool) -> Result<BudgetPlan> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::domain(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    let [mm, init, bad, reserve] = strat.fractions();
    Ok(BudgetPlan {
        eps_mm: mm * eps,
        eps_bad_init: init * eps,
        eps_bad: bad * eps,
        eps_reserve: reserve * eps,
        eps_min: DEFAULT_EPS_MIN_FRACTION * eps,
        delta_i: 0.0,
        smooth,
    })
}

impl BudgetPlan {
    pub fn with_delta_i(mut self, delta_i: f64) -> Self {
        self.delta_i = delta_i;
        self
    }

    pub fn with_eps_min(mut self, eps_min: f64) -> Self {
        self.eps_min = eps_min;
        self
    }

    /// Sum of all four components (the global epsilon).
    pub fn total_epsilon(&self) -> f64 {
        self.eps_mm + self.eps_bad_init + self.eps_bad + self.eps_reserve
    }

    /// Merged online pool used by Smooth allocation.
    pub fn pool(&self) -> f64 {
        self.eps_bad_init + self.eps_bad
    }
}

/// Allocator lifecycle phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Paced,
    Reserve,
    Halted,
}

/// Outcome of asking the allocator to fund one bad query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Spend {
    /// Spend this epsilon on the query.
    Charge(f64),
    /// Halted: the query is not answered.
    Refused,
}

/// Per-stream spending state. Owned by one engine instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Allocator {
    smooth: bool,
    t: usize,
    eps_min: f64,
    phase: Phase,
    /// Static warm-up per-query spend (eps_bad_init / T, fixed up front).
    warmup_eps: f64,
    /// Remaining warm-up budget (static only; merged into the pool for smooth).
    init_rem: f64,
    /// Smooth: remaining merged pool. Static: remaining paced budget.
    pool_rem: f64,
    reserve_rem: f64,
    /// Locked estimate of the total bad count (0 until locked).
    b_est: f64,
    locked: bool,
    /// Static: max(B_est - T, 1) at lock time.
    rem_bad: f64,
    /// Static: fixed per-query paced spend, set at lock time.
    paced_eps: f64,
}

impl Allocator {
    pub fn new(plan: &BudgetPlan, t: usize) -> Result<Self> {
        if t < 1 {
            return Err(Error::domain("warm-up count must be >= 1".to_string()));
        }
        if plan.eps_min.is_nan() || plan.eps_min <= 0.0 {
            return Err(Error::domain("eps_min must be positive".to_string()));
        }
        let (init_rem, pool_rem) = if plan.smooth {
            (0.0, plan.pool())
        } else {
            (plan.eps_bad_init, plan.eps_bad)
        };
        Ok(Allocator {
            smooth: plan.smooth,
            t,
            eps_min: plan.eps_min,
            phase: Phase::Warmup,
            warmup_eps: plan.eps_bad_init / t as f64,
            init_rem,
            pool_rem,
            reserve_rem: plan.eps_reserve,
            b_est: 0.0,
            locked: false,
            rem_bad: 0.0,
            paced_eps: 0.0,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_smooth(&self) -> bool {
        self.smooth
    }

    pub fn locked_estimate(&self) -> f64 {
        self.b_est
    }

    pub fn pool_remaining(&self) -> f64 {
        self.pool_rem.max(0.0)
    }

    pub fn reserve_remaining(&self) -> f64 {
        self.reserve_rem
    }

    /// Unspent budget across all online components.
    pub fn unspent(&self) -> f64 {
        self.init_rem.max(0.0) + self.pool_rem.max(0.0) + self.reserve_rem.max(0.0)
    }

    /// Smooth spend for the b-th bad query given the current estimate:
    /// `pool_rem / (max(1, b_hat - b) + 1)`. At most half the remaining
    /// pool, so in exact arithmetic the pool never empties and every spend
    /// is positive. (In f64 the remainder can exhaust subnormal range after
    /// ~1075 consecutive halvings; the engine's floor transition to the
    /// reserve keeps that regime unreachable.)
    pub fn smooth_next_epsilon(&mut self, b_hat: f64, b: usize) -> f64 {
        debug_assert!(self.smooth);
        debug_assert!(matches!(self.phase, Phase::Warmup | Phase::Paced));
        debug_assert!(self.pool_rem >= 0.0);
        let projected_rem = (b_hat - b as f64).max(1.0);
        let eps = self.pool_rem / (projected_rem + 1.0);
        self.pool_rem -= eps;
        self.phase = if b <= self.t {
            Phase::Warmup
        } else {
            Phase::Paced
        };
        eps
    }

    /// Static spend for the b-th bad query. Warm-up (b <= T) pays the fixed
    /// eps_bad_init / T; paced (T < b <= B_est) pays the per-query amount
    /// fixed at lock time.
    pub fn static_next_epsilon(&mut self, b: usize) -> f64 {
        debug_assert!(!self.smooth);
        if b <= self.t {
            debug_assert!(!self.locked || b == self.t);
            self.phase = Phase::Warmup;
            self.init_rem -= self.warmup_eps;
            self.warmup_eps
        } else {
            debug_assert!(self.locked, "paced spend before the estimate lock");
            self.phase = Phase::Paced;
            self.pool_rem -= self.paced_eps;
            self.paced_eps
        }
    }

    /// Draw from the reserve: spend half of what remains, or halt once the
    /// remainder drops below the floor. Halt is a value, not an error.
    pub fn reserve_draw(&mut self) -> Option<f64> {
        if self.phase == Phase::Halted {
            return None;
        }
        if self.reserve_rem < self.eps_min {
            self.phase = Phase::Halted;
            return None;
        }
        self.phase = Phase::Reserve;
        let eps = self.reserve_rem / 2.0;
        self.reserve_rem = eps;
        Some(eps)
    }

    /// Lock the stopping-time estimate. For static allocation this also
    /// folds any leftover warm-up budget into the paced pool and fixes the
    /// per-query paced spend at pool / max(B_est - T, 1).
    pub fn lock_estimate(&mut self, b_est: f64) {
        debug_assert!(!self.locked);
        self.locked = true;
        self.b_est = b_est;
        self.rem_bad = (b_est - self.t as f64).max(1.0);
        if !self.smooth {
            self.pool_rem += self.init_rem;
            self.init_rem = 0.0;
            self.paced_eps = self.pool_rem / self.rem_bad;
        }
    }

    /// Full spending policy for the b-th bad query, given the estimator's
    /// current value. Dispatches between warm-up/paced spends, the overflow
    /// branch (b past the locked estimate), and the reserve.
    pub fn next_epsilon(&mut self, b: usize, b_hat: f64) -> Spend {
        match self.phase {
            Phase::Halted => return Spend::Refused,
            Phase::Reserve => {
                return match self.reserve_draw() {
                    Some(eps) => Spend::Charge(eps),
                    None => Spend::Refused,
                };
            }
            _ => {}
        }
        let overflows = self.locked && (b as f64) > self.b_est && b > self.t;
        if self.smooth {
            // Past the estimate the projection floors at 1 and the formula
            // halves the pool; switch to the reserve once that would dip
            // below the floor rather than emit uselessly tiny spends.
            let projected_rem = (b_hat - b as f64).max(1.0);
            let candidate = self.pool_rem / (projected_rem + 1.0);
            if overflows && candidate < self.eps_min {
                return match self.reserve_draw() {
                    Some(eps) => Spend::Charge(eps),
                    None => Spend::Refused,
                };
            }
            Spend::Charge(self.smooth_next_epsilon(b_hat, b))
        } else if overflows {
            match self.reserve_draw() {
                Some(eps) => Spend::Charge(eps),
                None => Spend::Refused,
            }
        } else {
            Spend::Charge(self.static_next_epsilon(b))
        }
    }
}
