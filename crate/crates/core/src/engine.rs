//! The stream orchestrator: a matrix-mechanism precompute over the predicted
//! set, zero-cost serving of predicted queries, estimator-paced spending on
//! unpredicted ones, and an optional post-processing answer cache.
//!
//! Per-query flow: predicted queries are answered from the precomputed
//! release (pure post-processing, no charge). Unpredicted queries update the
//! stopping-time estimator on every arrival; the allocator funds an analytic
//! Gaussian release at sensitivity 1 (counting queries) or refuses once
//! halted. With the cache enabled, an unpredicted query that decomposes over
//! previously released answers is served for free and only misses spend
//! budget. Delta is charged only on randomized releases, so the ledger ends
//! at most (eps, delta) with delta_i = delta / (S + 1).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::allocation::{Allocator, BudgetPlan, Phase, Spend};
use crate::dp::{agm_sigma, sample_gaussian, NoiseScale, PrivacyLedger, PrivacyParams};
use crate::error::{Error, Result};
use crate::estimator::EstimatorState;
use crate::matrix::{
    pseudoinverse, run_matrix_mechanism, NoiseMode, PrecomputedAnswers, StrategyConfig,
};
use crate::types::{CanonicalQuery, DataVector, Query};

/// The oracle's prediction set P: queries expected to appear in the stream.
/// Duplicates are removed on construction (canonicalized exact match).
#[derive(Debug, Clone)]
pub struct PredictionSet {
    queries: Vec<Query>,
    index: HashSet<CanonicalQuery>,
}

impl PredictionSet {
    pub fn new(queries: impl IntoIterator<Item = Query>) -> Self {
        let mut index = HashSet::new();
        let mut kept = Vec::new();
        for q in queries {
            if index.insert(CanonicalQuery::from_coefficients(&q)) {
                kept.push(q);
            }
        }
        PredictionSet {
            queries: kept,
            index,
        }
    }

    pub fn empty() -> Self {
        PredictionSet {
            queries: Vec::new(),
            index: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn contains(&self, q: &[f64]) -> bool {
        self.index.contains(&CanonicalQuery::from_coefficients(q))
    }
}

/// Stream-query classification: membership in P, exact on canonicalized
/// coefficients (a scaled copy of a predicted query is unpredicted).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryClass {
    Good,
    Bad,
}

pub fn classify(q: &[f64], p: &PredictionSet) -> QueryClass {
    if p.contains(q) {
        QueryClass::Good
    } else {
        QueryClass::Bad
    }
}

/// Engine knobs beyond the budget plan.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub strategy: StrategyConfig,
    /// Max-norm residual below which a cache decomposition counts as exact.
    pub cache_residual_tol: f64,
    /// Test hook: force every release's noise scale to zero. Accounting is
    /// unchanged; only the sampled noise disappears.
    pub noiseless: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            strategy: StrategyConfig::default(),
            cache_residual_tol: 1e-6,
            noiseless: false,
        }
    }
}

/// Released answer or an explicit refusal (post-halt bad query). Stream
/// positions stay aligned; refusals are never silently dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QueryOutcome {
    Answered(f64),
    Refused,
}

impl QueryOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            QueryOutcome::Answered(v) => Some(*v),
            QueryOutcome::Refused => None,
        }
    }
}

/// Per-query observability record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    /// 1-based stream position.
    pub position: usize,
    pub class: QueryClass,
    /// Allocator phase after this query was handled.
    pub phase: Phase,
    pub eps_spent: f64,
    pub delta_spent: f64,
    /// Fresh-noise scale used for this answer (0 for post-processing paths).
    pub sigma: f64,
    pub answer: Option<f64>,
    pub true_answer: f64,
    /// Estimator snapshot after this arrival.
    pub b_hat: f64,
    /// Theoretical variance of the released answer, when one was released.
    pub variance: Option<f64>,
    pub cache_hit: bool,
}

/// Full trace of one stream run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamTrace {
    pub records: Vec<QueryRecord>,
    pub halted: bool,
    /// Budget never spent by the end of the stream.
    pub wasted_eps: f64,
    pub spent_eps: f64,
    pub spent_delta: f64,
    pub cap_eps: f64,
    pub cap_delta: f64,
    /// Epsilon spent on bad-query releases (excludes the precompute).
    pub online_eps: f64,
    /// Epsilon charged by the matrix-mechanism precompute.
    pub mm_eps: f64,
    /// Randomized releases performed (precompute + fresh bad answers).
    pub randomized_releases: usize,
    pub realized_bad: usize,
}

/// Outcome of a stream run: answers aligned with the stream, plus the trace.
#[derive(Debug, Clone)]
pub struct StreamRun {
    pub outcomes: Vec<QueryOutcome>,
    pub trace: StreamTrace,
}

impl StreamRun {
    /// (answer, truth) pairs over answered queries only.
    pub fn answered_pairs(&self) -> (Vec<f64>, Vec<f64>) {
        let mut answers = Vec::new();
        let mut truths = Vec::new();
        for (o, r) in self.outcomes.iter().zip(&self.trace.records) {
            if let QueryOutcome::Answered(a) = o {
                answers.push(*a);
                truths.push(r.true_answer);
            }
        }
        (answers, truths)
    }

    pub fn refused_count(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| matches!(o, QueryOutcome::Refused))
            .count()
    }
}

/// Post-processing cache: previously released DP answers, served as linear
/// combinations at zero cost. Stores the release covariance so combined
/// answers report honest variances.
#[derive(Debug, Clone)]
pub struct AnswerCache {
    queries: Vec<Query>,
    answers: Vec<f64>,
    covariance: DMatrix<f64>,
    residual_tol: f64,
}

impl AnswerCache {
    pub fn new(residual_tol: f64) -> Self {
        AnswerCache {
            queries: Vec::new(),
            answers: Vec::new(),
            covariance: DMatrix::zeros(0, 0),
            residual_tol,
        }
    }

    /// Seed the cache with a matrix-mechanism release (queries, answers and
    /// their full covariance).
    pub fn seed_from_release(&mut self, queries: &[Query], release: &PrecomputedAnswers) {
        debug_assert!(self.queries.is_empty());
        debug_assert_eq!(queries.len(), release.len());
        self.queries = queries.to_vec();
        self.answers = release.answers().to_vec();
        self.covariance = release.covariance();
    }

    /// Append one independently released answer.
    pub fn push(&mut self, query: Query, answer: f64, variance: f64) {
        let k = self.queries.len();
        let mut cov = DMatrix::zeros(k + 1, k + 1);
        cov.view_mut((0, 0), (k, k)).copy_from(&self.covariance);
        cov[(k, k)] = variance;
        self.covariance = cov;
        self.queries.push(query);
        self.answers.push(answer);
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Least-squares decomposition of `q` over the cached queries; Some
    /// coefficients iff the representation is exact to the residual
    /// tolerance (max norm).
    pub fn decompose(&self, q: &[f64]) -> Option<Vec<f64>> {
        if self.queries.is_empty() {
            return None;
        }
        let n = q.len();
        let k = self.queries.len();
        let basis_t = DMatrix::from_fn(n, k, |i, j| self.queries[j][i]);
        let target = DVector::from_column_slice(q);
        let coeffs = pseudoinverse(&basis_t) * &target;
        let residual = &basis_t * &coeffs - &target;
        if residual.amax() <= self.residual_tol {
            Some(coeffs.iter().copied().collect())
        } else {
            None
        }
    }

    /// Combined answer for a decomposition.
    pub fn answer(&self, coefficients: &[f64]) -> f64 {
        coefficients
            .iter()
            .zip(&self.answers)
            .map(|(c, a)| c * a)
            .sum()
    }

    /// Variance of the combined answer: c^T Cov c.
    pub fn variance(&self, coefficients: &[f64]) -> f64 {
        let c = DVector::from_column_slice(coefficients);
        (c.transpose() * &self.covariance * &c)[(0, 0)]
    }
}

/// Least-squares decomposition of a query over the cache basis; None on a
/// residual above tolerance (the caller treats the query as a miss).
pub fn cache_decompose(cache: &AnswerCache, q: &[f64]) -> Option<Vec<f64>> {
    cache.decompose(q)
}

/// Run the full mechanism over a stream, without the answer cache.
pub fn process_stream<R: Rng + ?Sized>(
    stream: &[Query],
    x: &DataVector,
    p: &PredictionSet,
    plan: &BudgetPlan,
    config: &EngineConfig,
    rng: &mut R,
) -> Result<StreamRun> {
    run_stream(stream, x, p, plan, config, false, rng)
}

/// Run the full mechanism with the post-processing cache enabled: bad
/// queries first try a zero-cost decomposition over released answers, and
/// misses append their fresh release to the cache.
pub fn process_stream_with_cache<R: Rng + ?Sized>(
    stream: &[Query],
    x: &DataVector,
    p: &PredictionSet,
    plan: &BudgetPlan,
    config: &EngineConfig,
    rng: &mut R,
) -> Result<StreamRun> {
    run_stream(stream, x, p, plan, config, true, rng)
}

fn run_stream<R: Rng + ?Sized>(
    stream: &[Query],
    x: &DataVector,
    p: &PredictionSet,
    plan: &BudgetPlan,
    config: &EngineConfig,
    use_cache: bool,
    rng: &mut R,
) -> Result<StreamRun> {
    let s = stream.len();
    if s < 2 {
        return Err(Error::config("stream must contain at least 2 queries"));
    }
    for (i, q) in stream.iter().enumerate() {
        if q.len() != x.len() {
            return Err(Error::config(format!(
                "stream query {i} has length {} but the histogram has {} bins",
                q.len(),
                x.len()
            )));
        }
    }
    if !(plan.delta_i > 0.0 && plan.delta_i < 1.0) {
        return Err(Error::config(format!(
            "plan delta_i must be set to delta/(S+1) before running, got {}",
            plan.delta_i
        )));
    }
    let components = [
        plan.eps_mm,
        plan.eps_bad_init,
        plan.eps_bad,
        plan.eps_reserve,
    ];
    if components.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::config(format!(
            "budget components must be nonnegative: {components:?}"
        )));
    }

    let cap_eps = plan.total_epsilon();
    let cap_delta = plan.delta_i * (s + 1) as f64;
    let mut ledger = PrivacyLedger::new(PrivacyParams::new(cap_eps, cap_delta)?);
    let mut estimator = EstimatorState::new(s)?;
    let mut allocator = Allocator::new(plan, estimator.warmup())?;

    let mm_noise = if config.noiseless {
        NoiseMode::Fixed(0.0)
    } else {
        NoiseMode::Calibrated
    };
    let release = run_matrix_mechanism(
        p.queries(),
        x,
        plan.eps_mm,
        plan.delta_i,
        &mut ledger,
        &config.strategy,
        mm_noise,
        rng,
    )?;
    let mut randomized_releases = 0usize;
    let mm_eps = if release.is_empty() { 0.0 } else { plan.eps_mm };
    if !release.is_empty() {
        randomized_releases += 1;
    }

    let mut cache = AnswerCache::new(config.cache_residual_tol);
    if use_cache && !release.is_empty() {
        cache.seed_from_release(p.queries(), &release);
    }

    let mut outcomes = Vec::with_capacity(s);
    let mut records = Vec::with_capacity(s);
    let mut online_eps = 0.0;
    let mut realized_bad = 0usize;

    for (i, q) in stream.iter().enumerate() {
        let n = i + 1;
        let truth = x.answer(q);
        match classify(q, p) {
            QueryClass::Good => {
                estimator.observe_good(n)?;
                let (answer, variance) = release.answer_with_variance(q).ok_or_else(|| {
                    Error::invariant(format!(
                        "predicted query at position {n} missing from the precomputed release"
                    ))
                })?;
                outcomes.push(QueryOutcome::Answered(answer));
                records.push(QueryRecord {
                    position: n,
                    class: QueryClass::Good,
                    phase: allocator.phase(),
                    eps_spent: 0.0,
                    delta_spent: 0.0,
                    sigma: 0.0,
                    answer: Some(answer),
                    true_answer: truth,
                    b_hat: estimator.estimate(),
                    variance: Some(variance),
                    cache_hit: false,
                });
            }
            QueryClass::Bad => {
                realized_bad += 1;
                let b_hat = estimator.observe_bad(n)?;
                let b = estimator.bad_seen();

                let mut record = QueryRecord {
                    position: n,
                    class: QueryClass::Bad,
                    phase: allocator.phase(),
                    eps_spent: 0.0,
                    delta_spent: 0.0,
                    sigma: 0.0,
                    answer: None,
                    true_answer: truth,
                    b_hat,
                    variance: None,
                    cache_hit: false,
                };

                let cache_coeffs = if use_cache { cache.decompose(q) } else { None };
                if let Some(coeffs) = cache_coeffs {
                    let answer = cache.answer(&coeffs);
                    record.answer = Some(answer);
                    record.variance = Some(cache.variance(&coeffs));
                    record.cache_hit = true;
                    outcomes.push(QueryOutcome::Answered(answer));
                } else {
                    match allocator.next_epsilon(b, b_hat) {
                        Spend::Charge(eps_b) => {
                            let scale = if config.noiseless {
                                NoiseScale::new(0.0)?
                            } else {
                                agm_sigma(1.0, &PrivacyParams::new(eps_b, plan.delta_i)?)?
                            };
                            ledger
                                .charge(format!("bad_{n}"), eps_b, plan.delta_i)
                                .map_err(|e| {
                                    Error::invariant(format!("online spend broke the cap: {e}"))
                                })?;
                            let answer = truth + sample_gaussian(scale, rng);
                            online_eps += eps_b;
                            randomized_releases += 1;
                            record.eps_spent = eps_b;
                            record.delta_spent = plan.delta_i;
                            record.sigma = scale.sigma();
                            record.answer = Some(answer);
                            record.variance = Some(scale.variance());
                            outcomes.push(QueryOutcome::Answered(answer));
                            if use_cache {
                                cache.push(q.clone(), answer, scale.variance());
                            }
                        }
                        Spend::Refused => {
                            outcomes.push(QueryOutcome::Refused);
                        }
                    }
                }

                // the estimate locks on the T-th bad arrival, whether it was
                // paid for, served from the cache, or refused
                if b == estimator.warmup() {
                    allocator.lock_estimate(estimator.estimate());
                }
                record.phase = allocator.phase();
                records.push(record);
            }
        }
    }

    let trace = StreamTrace {
        records,
        halted: allocator.phase() == Phase::Halted,
        wasted_eps: cap_eps - ledger.spent_epsilon(),
        spent_eps: ledger.spent_epsilon(),
        spent_delta: ledger.spent_delta(),
        cap_eps,
        cap_delta,
        online_eps,
        mm_eps,
        randomized_releases,
        realized_bad,
    };
    Ok(StreamRun { outcomes, trace })
}
