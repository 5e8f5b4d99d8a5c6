//! Workload-aware batch release: strategy selection, sensitivity,
//! pseudoinverse reconstruction, and per-query answering from a precomputed
//! noisy release.
//!
//! The strategy is perturbed instead of the workload: release `y = A x + noise`
//! once, then reconstruct every workload answer as `W A+ y`. Strategy search
//! evaluates fixed families (identity, the workload itself, a padded binary
//! tree) plus a projected-gradient refinement, under the scale-invariant
//! objective `sens(A)^2 * ||W A+||_F^2`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{agm_sigma, sample_gaussian, NoiseScale, PrivacyLedger, PrivacyParams};
use crate::error::{Error, Result};
use crate::types::{CanonicalQuery, DataVector, Query};

/// Row residual below which a workload row counts as lying in the strategy's
/// row space.
const SUPPORT_TOL: f64 = 1e-8;
/// Singular values below this fraction of the largest are treated as zero.
const PINV_RELATIVE_CUTOFF: f64 = 1e-10;

/// A stack of linear queries: an m x n matrix with one query per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    matrix: DMatrix<f64>,
}

impl Workload {
    pub fn from_rows(rows: &[Query]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::domain("workload must contain at least one query"));
        }
        let n = rows[0].len();
        if n == 0 {
            return Err(Error::domain("queries must have at least one coefficient"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::domain(format!(
                    "query {i} has length {} but expected {n}",
                    r.len()
                )));
            }
            if r.iter().all(|&v| v == 0.0) {
                return Err(Error::domain(format!("query {i} is all-zero")));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(format!(
                    "query {i} has non-finite coefficients"
                )));
            }
        }
        let matrix = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
        Ok(Workload { matrix })
    }

    pub fn num_queries(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn domain_size(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> Query {
        self.matrix.row(i).iter().copied().collect()
    }
}

/// Which family a strategy matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Identity,
    Workload,
    Hierarchical,
    Optimized,
}

/// The matrix actually perturbed with noise. Must support the workload:
/// every workload row has to lie in its row space.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyMatrix {
    matrix: DMatrix<f64>,
    kind: StrategyKind,
}

impl StrategyMatrix {
    pub fn new(matrix: DMatrix<f64>, kind: StrategyKind) -> Self {
        StrategyMatrix { matrix, kind }
    }

    pub fn identity(n: usize) -> Self {
        StrategyMatrix::new(DMatrix::identity(n, n), StrategyKind::Identity)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    /// L2 sensitivity of releasing `A x` under one-record change: the
    /// maximum column 2-norm.
    pub fn l2_sensitivity(&self) -> f64 {
        max_column_norm(&self.matrix)
    }

    /// Whether every workload row lies in this strategy's row space
    /// (least-squares residual per row at most 1e-8).
    pub fn supports(&self, w: &Workload) -> bool {
        if w.domain_size() != self.matrix.ncols() {
            return false;
        }
        let ap = pseudoinverse(&self.matrix);
        // residual of projecting each row onto the row space: W A+ A - W
        let projected = w.matrix() * &ap * &self.matrix;
        let diff = projected - w.matrix();
        (0..diff.nrows()).all(|i| diff.row(i).norm() <= SUPPORT_TOL)
    }
}

fn max_column_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).norm())
        .fold(0.0, f64::max)
}

/// Moore-Penrose pseudoinverse via SVD, with singular values below
/// 1e-10 x (largest singular value) treated as zero. Defined for all
/// matrices; satisfies the four Penrose conditions to working precision.
pub fn pseudoinverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let max_sv = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = PINV_RELATIVE_CUTOFF * max_sv;
    let mut result = DMatrix::zeros(a.ncols(), a.nrows());
    for i in 0..svd.singular_values.len() {
        let s = svd.singular_values[i];
        if s > cutoff && s > 0.0 {
            // A+ = sum_i v_i u_i^T / s_i
            let vi = v_t.row(i).transpose();
            let ui = u.column(i);
            result += vi * ui.transpose() / s;
        }
    }
    result
}

/// Scale-invariant quality proxy for a strategy: `sens(A)^2 * ||W A+||_F^2`
/// (total reconstruction variance per unit of privacy). Errors if the
/// strategy does not support the workload.
pub fn strategy_objective(w: &Workload, a: &StrategyMatrix) -> Result<f64> {
    if !a.supports(w) {
        return Err(Error::domain(
            "strategy does not support the workload (rows outside its row space)",
        ));
    }
    let ap = pseudoinverse(a.matrix());
    let wap = w.matrix() * ap;
    let sens = a.l2_sensitivity();
    Ok(sens * sens * wap.norm_squared())
}

/// Binary-tree strategy over the domain, padded up to the next power of two
/// with zero-weight phantom bins; all-zero and duplicate rows are dropped.
pub fn hierarchical_strategy(n: usize) -> StrategyMatrix {
    let mut padded = 1usize;
    while padded < n {
        padded *= 2;
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut stack = vec![(0usize, padded)];
    while let Some((lo, hi)) = stack.pop() {
        let mut row = vec![0.0; n];
        for cell in row.iter_mut().take(hi.min(n)).skip(lo.min(n)) {
            *cell = 1.0;
        }
        if row.iter().any(|&v| v != 0.0) {
            rows.push(row);
        }
        if hi - lo > 1 {
            let mid = (lo + hi) / 2;
            stack.push((lo, mid));
            stack.push((mid, hi));
        }
    }
    let mut seen = std::collections::HashSet::new();
    rows.retain(|r| seen.insert(CanonicalQuery::from_coefficients(r)));
    let matrix = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
    StrategyMatrix::new(matrix, StrategyKind::Hierarchical)
}

/// Strategy search configuration (exposed in the experiment config).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    /// Candidate families to evaluate.
    pub candidates: Vec<StrategyKind>,
    /// Gradient-descent iteration cap.
    pub optimizer_iterations: usize,
    /// Stop when the relative objective improvement falls below this.
    pub convergence_tol: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            candidates: vec![
                StrategyKind::Identity,
                StrategyKind::Workload,
                StrategyKind::Hierarchical,
                StrategyKind::Optimized,
            ],
            optimizer_iterations: 500,
            convergence_tol: 1e-7,
        }
    }
}

/// `tr(W (A^T A)^{-1} W^T)`: the reconstruction variance when all strategy
/// columns are clamped to unit norm. Returns None when the Gram matrix is
/// numerically singular.
fn clamped_variance(w: &DMatrix<f64>, a: &DMatrix<f64>) -> Option<(f64, DMatrix<f64>)> {
    let gram = a.transpose() * a;
    let chol = match nalgebra::Cholesky::new(gram.clone()) {
        Some(c) => c,
        None => {
            // ridge fallback for near-singular iterates
            let ridge = 1e-10 * gram.trace() / gram.nrows() as f64;
            let regularized = gram + DMatrix::identity(a.ncols(), a.ncols()) * ridge;
            nalgebra::Cholesky::new(regularized)?
        }
    };
    // X = G^{-1} W^T, objective = tr(W X)
    let x = chol.solve(&w.transpose());
    let mut value = 0.0;
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            value += w[(i, j)] * x[(j, i)];
        }
    }
    if value.is_finite() {
        Some((value, x))
    } else {
        None
    }
}

/// Clamp every column to norm at most one.
fn project_columns(a: &mut DMatrix<f64>) {
    for j in 0..a.ncols() {
        let norm = a.column(j).norm();
        if norm > 1.0 {
            let mut col = a.column_mut(j);
            col /= norm;
        }
    }
}

/// Projected gradient descent on the clamped variance, starting from a
/// feasible scaling of `start`. Backtracking line search; stops on the
/// relative-improvement tolerance or the iteration cap.
fn optimize_strategy(
    w: &DMatrix<f64>,
    start: &DMatrix<f64>,
    iterations: usize,
    tol: f64,
) -> Option<DMatrix<f64>> {
    let max_col = max_column_norm(start);
    if max_col <= 0.0 {
        return None;
    }
    let mut a = start / max_col;
    let (mut current, mut x) = clamped_variance(w, &a)?;
    for _ in 0..iterations {
        // grad of tr(W G^-1 W^T) wrt A is -2 A (G^-1 W^T)(G^-1 W^T)^T
        let grad = -2.0 * &a * (&x * x.transpose());
        let grad_norm_sq = grad.norm_squared();
        if grad_norm_sq <= 0.0 || !grad_norm_sq.is_finite() {
            break;
        }
        let mut step = 0.1 * a.norm() / grad_norm_sq.sqrt();
        let mut improved = false;
        for _ in 0..40 {
            let mut candidate = &a - &grad * step;
            project_columns(&mut candidate);
            if let Some((value, xc)) = clamped_variance(w, &candidate) {
                if value < current - 1e-4 * step * grad_norm_sq {
                    let gain = current - value;
                    a = candidate;
                    x = xc;
                    let done = gain < tol * current.abs();
                    current = value;
                    improved = true;
                    if done {
                        return Some(a);
                    }
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Some(a)
}

/// Evaluate the candidate strategies and return the argmin of the
/// scale-invariant objective. The gradient-refined candidate starts from the
/// best fixed one; divergence falls back to that fixed candidate, so this
/// never errors outward. Fully deterministic.
pub fn select_strategy(w: &Workload, cfg: &StrategyConfig) -> StrategyMatrix {
    let n = w.domain_size();
    let mut best: Option<(f64, StrategyMatrix)> = None;
    let consider = |candidate: StrategyMatrix, best: &mut Option<(f64, StrategyMatrix)>| {
        if let Ok(obj) = strategy_objective(w, &candidate) {
            if obj.is_finite() && best.as_ref().is_none_or(|(b, _)| obj < *b) {
                *best = Some((obj, candidate));
            }
        }
    };

    for kind in &cfg.candidates {
        match kind {
            StrategyKind::Identity => consider(StrategyMatrix::identity(n), &mut best),
            StrategyKind::Workload => consider(
                StrategyMatrix::new(w.matrix().clone(), StrategyKind::Workload),
                &mut best,
            ),
            StrategyKind::Hierarchical => consider(hierarchical_strategy(n), &mut best),
            StrategyKind::Optimized => {}
        }
    }
    // identity always supports; guarantee a baseline even with odd configs
    if best.is_none() {
        let identity = StrategyMatrix::identity(n);
        let obj = strategy_objective(w, &identity).expect("identity supports any workload");
        best = Some((obj, identity));
    }

    if cfg.candidates.contains(&StrategyKind::Optimized) {
        let (_, incumbent) = best.as_ref().expect("fixed candidate present");
        if let Some(refined) = optimize_strategy(
            w.matrix(),
            incumbent.matrix(),
            cfg.optimizer_iterations,
            cfg.convergence_tol,
        ) {
            consider(
                StrategyMatrix::new(refined, StrategyKind::Optimized),
                &mut best,
            );
        }
    }
    best.expect("at least one candidate").1
}

/// How the release noise scale is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseMode {
    /// Analytic Gaussian calibration from (eps, delta_i) and the strategy
    /// sensitivity.
    Calibrated,
    /// Fixed scale; test hook (zero gives the noiseless release).
    Fixed(f64),
}

/// A released batch: reconstructed answers for every workload row plus
/// the bookkeeping needed to serve and audit them. Answering from this
/// object performs no randomization.
#[derive(Debug, Clone)]
pub struct PrecomputedAnswers {
    reconstruction: Vec<f64>,
    per_query_variance: Vec<f64>,
    sigma_used: f64,
    strategy_kind: Option<StrategyKind>,
    index: HashMap<CanonicalQuery, usize>,
    /// W A+ (m x p): kept so answer covariances stay available downstream.
    reconstruction_map: DMatrix<f64>,
}

impl PrecomputedAnswers {
    /// A release that answers nothing (the empty-prediction case).
    pub fn empty() -> Self {
        PrecomputedAnswers {
            reconstruction: Vec::new(),
            per_query_variance: Vec::new(),
            sigma_used: 0.0,
            strategy_kind: None,
            index: HashMap::new(),
            reconstruction_map: DMatrix::zeros(0, 0),
        }
    }

    pub fn len(&self) -> usize {
        self.reconstruction.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reconstruction.is_empty()
    }

    pub fn sigma_used(&self) -> f64 {
        self.sigma_used
    }

    pub fn strategy_kind(&self) -> Option<StrategyKind> {
        self.strategy_kind
    }

    pub fn answers(&self) -> &[f64] {
        &self.reconstruction
    }

    pub fn variances(&self) -> &[f64] {
        &self.per_query_variance
    }

    /// Exact-match lookup: the stored noisy answer for `q`, or None if the
    /// query was not part of the released workload. Free of charge; repeated
    /// calls return the identical value.
    pub fn answer(&self, q: &[f64]) -> Option<f64> {
        self.lookup(q).map(|i| self.reconstruction[i])
    }

    pub fn answer_with_variance(&self, q: &[f64]) -> Option<(f64, f64)> {
        self.lookup(q)
            .map(|i| (self.reconstruction[i], self.per_query_variance[i]))
    }

    fn lookup(&self, q: &[f64]) -> Option<usize> {
        self.index
            .get(&CanonicalQuery::from_coefficients(q))
            .copied()
    }

    /// Covariance of the released answers: `sigma^2 (W A+)(W A+)^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let s2 = self.sigma_used * self.sigma_used;
        &self.reconstruction_map * self.reconstruction_map.transpose() * s2
    }
}

/// Run the matrix mechanism over a predicted workload: pick a strategy,
/// calibrate, charge the ledger once, release `A x + noise`, and store the
/// reconstruction `W A+ y` with per-query variances.
///
/// An empty workload returns an empty release and charges nothing. A charge
/// that does not fit propagates `BudgetExceeded` (before any sampling).
#[allow(clippy::too_many_arguments)]
pub fn run_matrix_mechanism<R: Rng + ?Sized>(
    queries: &[Query],
    x: &DataVector,
    eps: f64,
    delta_i: f64,
    ledger: &mut PrivacyLedger,
    cfg: &StrategyConfig,
    noise: NoiseMode,
    rng: &mut R,
) -> Result<PrecomputedAnswers> {
    if queries.is_empty() {
        return Ok(PrecomputedAnswers::empty());
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::domain(format!(
            "matrix mechanism epsilon must be positive, got {eps}"
        )));
    }
    let w = Workload::from_rows(queries)?;
    if w.domain_size() != x.len() {
        return Err(Error::domain(format!(
            "workload domain {} does not match data vector length {}",
            w.domain_size(),
            x.len()
        )));
    }
    let strategy = select_strategy(&w, cfg);
    let sensitivity = strategy.l2_sensitivity();
    let scale = match noise {
        NoiseMode::Calibrated => agm_sigma(sensitivity, &PrivacyParams::new(eps, delta_i)?)?,
        NoiseMode::Fixed(s) => NoiseScale::new(s)?,
    };
    ledger.charge("matrix_mechanism", eps, delta_i)?;

    let a = strategy.matrix();
    let xv = DVector::from_column_slice(x.as_slice());
    let mut y = a * xv;
    for value in y.iter_mut() {
        *value += sample_gaussian(scale, rng);
    }
    let wap = w.matrix() * pseudoinverse(a);
    let reconstruction_vec = &wap * y;
    let sigma = scale.sigma();
    let per_query_variance: Vec<f64> = (0..wap.nrows())
        .map(|i| sigma * sigma * wap.row(i).norm_squared())
        .collect();
    let mut index = HashMap::with_capacity(queries.len());
    for (i, q) in queries.iter().enumerate() {
        index
            .entry(CanonicalQuery::from_coefficients(q))
            .or_insert(i);
    }
    Ok(PrecomputedAnswers {
        reconstruction: reconstruction_vec.iter().copied().collect(),
        per_query_variance,
        sigma_used: sigma,
        strategy_kind: Some(strategy.kind()),
        index,
        reconstruction_map: wap,
    })
}
