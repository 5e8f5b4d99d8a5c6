//! Comparison mechanisms: per-query independent noise, and a clairvoyant
//! matrix mechanism run over the realized stream.

use rand::Rng;

use crate::dp::{agm_sigma, sample_gaussian, PrivacyLedger, PrivacyParams};
use crate::error::{Error, Result};
use crate::matrix::{run_matrix_mechanism, NoiseMode, StrategyConfig};
use crate::types::{CanonicalQuery, DataVector, Query};

/// Answers and accounting for one baseline run.
#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub answers: Vec<f64>,
    pub total_eps: f64,
    pub total_delta: f64,
    /// Theoretical per-answer noise standard deviation.
    pub per_query_sigma: Vec<f64>,
}

/// Online Independent Noise: every query gets an analytic-Gaussian answer at
/// (eps/S, delta/(S+1)), mirroring the engine's delta schedule. Duplicates
/// are re-answered with fresh noise.
pub fn online_independent<R: Rng + ?Sized>(
    stream: &[Query],
    x: &DataVector,
    eps: f64,
    delta: f64,
    rng: &mut R,
) -> Result<BaselineResult> {
    let s = stream.len();
    if s < 1 {
        return Err(Error::domain("stream must contain at least one query"));
    }
    let eps_i = eps / s as f64;
    let delta_i = delta / (s + 1) as f64;
    let scale = agm_sigma(1.0, &PrivacyParams::new(eps_i, delta_i)?)?;
    let mut ledger = PrivacyLedger::new(PrivacyParams::new(eps, delta)?);
    let mut answers = Vec::with_capacity(s);
    for (i, q) in stream.iter().enumerate() {
        ledger.charge(format!("online_{}", i + 1), eps_i, delta_i)?;
        answers.push(x.answer(q) + sample_gaussian(scale, rng));
    }
    Ok(BaselineResult {
        answers,
        total_eps: ledger.spent_epsilon(),
        total_delta: ledger.spent_delta(),
        per_query_sigma: vec![scale.sigma(); s],
    })
}

/// OfflineMM: one matrix-mechanism release over the distinct queries of the
/// realized stream at (eps, delta/(S+1)); duplicates are answered from the
/// same release. The clairvoyant utility reference.
pub fn offline_mm<R: Rng + ?Sized>(
    stream: &[Query],
    x: &DataVector,
    eps: f64,
    delta: f64,
    cfg: &StrategyConfig,
    rng: &mut R,
) -> Result<BaselineResult> {
    let s = stream.len();
    if s < 1 {
        return Err(Error::domain("stream must contain at least one query"));
    }
    let mut seen = std::collections::HashSet::new();
    let distinct: Vec<Query> = stream
        .iter()
        .filter(|q| seen.insert(CanonicalQuery::from_coefficients(q)))
        .cloned()
        .collect();
    let delta_i = delta / (s + 1) as f64;
    let mut ledger = PrivacyLedger::new(PrivacyParams::new(eps, delta)?);
    let release = run_matrix_mechanism(
        &distinct,
        x,
        eps,
        delta_i,
        &mut ledger,
        cfg,
        NoiseMode::Calibrated,
        rng,
    )?;
    let mut answers = Vec::with_capacity(s);
    let mut per_query_sigma = Vec::with_capacity(s);
    for q in stream {
        let (a, var) = release
            .answer_with_variance(q)
            .ok_or_else(|| Error::invariant("stream query missing from its own release"))?;
        answers.push(a);
        per_query_sigma.push(var.sqrt());
    }
    Ok(BaselineResult {
        answers,
        total_eps: ledger.spent_epsilon(),
        total_delta: ledger.spent_delta(),
        per_query_sigma,
    })
}
