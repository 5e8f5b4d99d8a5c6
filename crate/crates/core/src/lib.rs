//! Learning-augmented differentially private answering of linear query
//! streams.
//!
//! A curator holds a histogram and must answer a stream of linear counting
//! queries under one global (epsilon, delta) budget. Given an untrusted
//! prediction of which queries will appear, the predicted set is released
//! up front through a workload-aware matrix mechanism and served at zero
//! marginal cost; unpredicted queries are answered online with analytic
//! Gaussian noise, paced by an unbiased stopping-time estimate of how many
//! of them remain. The crate also ships the independent-noise and
//! clairvoyant-batch baselines, error metrics, and a deterministic seeded
//! experiment harness.

pub mod allocation;
pub mod baselines;
pub mod dp;
pub mod engine;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod fixtures;
pub mod matrix;
pub mod metrics;
pub mod types;
pub mod verify;
pub mod workload;

pub use allocation::{split_budget, Allocator, BudgetPlan, Phase, Spend, SplitStrategy};
pub use baselines::{offline_mm, online_independent, BaselineResult};
pub use dp::{
    agm_privacy_profile, agm_sigma, classic_gaussian_sigma, sample_gaussian, NoiseScale,
    PrivacyLedger, PrivacyParams,
};
pub use engine::{
    cache_decompose, classify, process_stream, process_stream_with_cache, AnswerCache,
    EngineConfig, PredictionSet, QueryClass, QueryOutcome, QueryRecord, StreamRun, StreamTrace,
};
pub use error::{Error, Result};
pub use estimator::{
    inverse_factorial_moment, nhg_pmf, running_estimate, stopping_estimate, warmup_length,
    EstimatorState,
};
pub use experiment::{
    derive_seed, emit_results, run_experiment, DatasetConfig, ExperimentConfig, ExperimentOutput,
    Mechanism, OutputFormat, ResultRow, TrialRecord,
};
pub use matrix::{
    hierarchical_strategy, pseudoinverse, run_matrix_mechanism, select_strategy,
    strategy_objective, NoiseMode, PrecomputedAnswers, StrategyConfig, StrategyKind,
    StrategyMatrix, Workload,
};
pub use metrics::{compute_metrics, ErrorReport};
pub use types::{CanonicalQuery, DataVector, Query};
pub use workload::{
    build_stream, dump_queries, ingest_histogram, load_queries, oracle_predict,
    random_binary_universe, range_universe, Binning, QueryUniverse, Stream, StreamOrder,
    StreamSpec, UniverseKind,
};
