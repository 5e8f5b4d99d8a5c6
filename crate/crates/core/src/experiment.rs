//! The experiment runner: overlap sweeps over mechanism x split x rho grids,
//! multi-run aggregation, seed derivation, and result emission.
//!
//! Determinism contract: the full sweep is a pure function of the config.
//! Trials run in parallel but results are assembled in grid order, so
//! parallelism never affects output bytes. Seeds derive from the base seed
//! and grid indices; prediction sets are shared per run and streams per
//! (rho, run), so mechanisms compare on identical inputs.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{split_budget, SplitStrategy};
use crate::baselines::{offline_mm, online_independent};
use crate::engine::{process_stream, process_stream_with_cache, EngineConfig, PredictionSet};
use crate::error::{Error, Result};
use crate::fixtures::synthetic_histogram;
use crate::matrix::StrategyConfig;
use crate::metrics::{compute_metrics, ErrorReport};
use crate::types::DataVector;
use crate::workload::{
    build_stream, ingest_histogram, oracle_predict, random_binary_universe, range_universe,
    Binning, StreamOrder, StreamSpec,
};

/// Mechanisms the sweep can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    LaprasStatic,
    LaprasSmooth,
    LaprasSmoothCache,
    OnlineIndependent,
    OfflineMm,
}

impl Mechanism {
    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::LaprasStatic => "lapras_static",
            Mechanism::LaprasSmooth => "lapras_smooth",
            Mechanism::LaprasSmoothCache => "lapras_smooth_cache",
            Mechanism::OnlineIndependent => "online_independent",
            Mechanism::OfflineMm => "offline_mm",
        }
    }

    /// Whether the mechanism consumes a budget split (baselines do not).
    pub fn uses_split(&self) -> bool {
        matches!(
            self,
            Mechanism::LaprasStatic | Mechanism::LaprasSmooth | Mechanism::LaprasSmoothCache
        )
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lapras_static" => Ok(Mechanism::LaprasStatic),
            "lapras_smooth" => Ok(Mechanism::LaprasSmooth),
            "lapras_smooth_cache" => Ok(Mechanism::LaprasSmoothCache),
            "online_independent" => Ok(Mechanism::OnlineIndependent),
            "offline_mm" => Ok(Mechanism::OfflineMm),
            other => Err(Error::config(format!("unknown mechanism '{other}'"))),
        }
    }
}

/// Where the histogram comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Seeded synthetic histogram with roughly `scale` total count.
    Synthetic { n: usize, seed: u64, scale: f64 },
    /// CSV ingestion of one column.
    Csv {
        path: String,
        column: String,
        binning: Binning,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniverseConfig {
    /// |P|: prediction-set size drawn from the range universe.
    pub prediction_size: usize,
    /// |U_rand|: size of the random binary universe feeding bad queries.
    pub random_count: usize,
    pub random_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSweepConfig {
    /// Stream length S.
    pub s: usize,
    pub order: StreamOrder,
    /// Overlap grid.
    pub rho: Vec<f64>,
}

fn default_eps_min_fraction() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub eps: f64,
    pub delta: f64,
    #[serde(default = "default_eps_min_fraction")]
    pub eps_min_fraction: f64,
    pub splits: Vec<SplitStrategy>,
}

fn default_cache_residual_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismsConfig {
    pub run: Vec<Mechanism>,
    #[serde(default = "default_cache_residual_tol")]
    pub cache_residual_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunsConfig {
    pub runs: usize,
    pub base_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: String,
    pub formats: Vec<OutputFormat>,
}

/// Full sweep description; parses from a sectioned key-value (TOML) file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub universe: UniverseConfig,
    pub stream: StreamSweepConfig,
    pub budget: BudgetConfig,
    pub mechanisms: MechanismsConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    pub experiment: RunsConfig,
    #[serde(default)]
    pub output: Option<OutputConfig>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("bad experiment config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    fn validate(&self) -> Result<()> {
        if self.experiment.runs < 1 {
            return Err(Error::config("runs must be >= 1"));
        }
        if self.stream.rho.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::config("every rho must lie in [0, 1]"));
        }
        if self.stream.s < 2 {
            return Err(Error::config("stream length must be >= 2"));
        }
        if self.budget.splits.is_empty() || self.mechanisms.run.is_empty() {
            return Err(Error::config("need at least one split and one mechanism"));
        }
        let eps_ok = self.budget.eps.is_finite() && self.budget.eps > 0.0;
        let delta_ok = self.budget.delta > 0.0 && self.budget.delta < 1.0;
        if !eps_ok || !delta_ok {
            return Err(Error::config(
                "budget must satisfy eps > 0 and delta in (0, 1)",
            ));
        }
        Ok(())
    }
}

/// Stable seed mixer (splitmix64 chain); identical across platforms.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a trial seed from the base seed and grid indices.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = splitmix64(base ^ 0xA076_1D64_78BD_642F);
    for &p in parts {
        state = splitmix64(state ^ splitmix64(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    state
}

const SALT_PREDICTION: u64 = 1;
const SALT_STREAM: u64 = 2;
const SALT_MECHANISM: u64 = 3;

/// One executed trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub mechanism: Mechanism,
    pub split: Option<SplitStrategy>,
    pub rho: f64,
    pub run: usize,
    pub seed: u64,
    pub metrics: ErrorReport,
    pub wasted_eps: f64,
    pub online_eps: f64,
}

/// Aggregated row for one (mechanism, split, rho) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub mechanism: String,
    pub split: String,
    pub rho: f64,
    pub order: String,
    pub runs: usize,
    pub mae_median: f64,
    pub mae_min: f64,
    pub mae_max: f64,
    pub rmse_median: f64,
    pub rmse_min: f64,
    pub rmse_max: f64,
    pub nmae_median: Option<f64>,
    pub nmae_min: Option<f64>,
    pub nmae_max: Option<f64>,
    pub nrmse_range_median: Option<f64>,
    pub nrmse_range_min: Option<f64>,
    pub nrmse_range_max: Option<f64>,
    pub mape_median: Option<f64>,
    pub mape_min: Option<f64>,
    pub mape_max: Option<f64>,
    pub smape_median: f64,
    pub smape_min: f64,
    pub smape_max: f64,
    pub wasted_eps_median: f64,
    pub n_refused_median: f64,
}

/// Everything a sweep produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub trials: Vec<TrialRecord>,
}

fn median_of(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN metrics"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn aggregate(values: &[f64]) -> (f64, f64, f64) {
    let median = median_of(values);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (median, min, max)
}

fn aggregate_optional(values: &[Option<f64>]) -> (Option<f64>, Option<f64>, Option<f64>) {
    let present: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if present.is_empty() {
        (None, None, None)
    } else {
        let (m, lo, hi) = aggregate(&present);
        (Some(m), Some(lo), Some(hi))
    }
}

fn load_dataset(cfg: &DatasetConfig) -> Result<DataVector> {
    match cfg {
        DatasetConfig::Synthetic { n, seed, scale } => synthetic_histogram(*n, *scale, *seed),
        DatasetConfig::Csv {
            path,
            column,
            binning,
        } => ingest_histogram(Path::new(path), column, binning),
    }
}

struct Trial {
    mechanism: Mechanism,
    mech_idx: usize,
    split: Option<SplitStrategy>,
    split_idx: usize,
    rho: f64,
    rho_idx: usize,
    run: usize,
}

/// Run the full sweep described by the config. Any trial failure aborts the
/// sweep, reporting the offending grid cell and seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let x = load_dataset(&cfg.dataset)?;
    let n = x.len();
    let range_u = range_universe(n)?;
    if cfg.universe.prediction_size > range_u.len() {
        return Err(Error::config(format!(
            "prediction size {} exceeds the range universe ({})",
            cfg.universe.prediction_size,
            range_u.len()
        )));
    }
    let u_rand = random_binary_universe(n, cfg.universe.random_count, cfg.universe.random_seed)?;
    let s = cfg.stream.s;
    for &rho in &cfg.stream.rho {
        let from_p = (rho * s as f64).floor() as usize;
        if from_p > cfg.universe.prediction_size {
            return Err(Error::config(format!(
                "rho {rho} needs {from_p} predicted queries but |P| = {}",
                cfg.universe.prediction_size
            )));
        }
        if s - from_p > cfg.universe.random_count {
            return Err(Error::config(format!(
                "rho {rho} needs {} unpredicted queries but |U_rand| = {}",
                s - from_p,
                cfg.universe.random_count
            )));
        }
    }

    let base = cfg.experiment.base_seed;
    let runs = cfg.experiment.runs;

    // seed-derivation audit: every distinct role must get a distinct seed
    let mut seed_set = HashSet::new();
    let mut expected = 0usize;
    for run in 0..runs {
        seed_set.insert(derive_seed(base, &[SALT_PREDICTION, run as u64]));
        expected += 1;
    }
    for rho_idx in 0..cfg.stream.rho.len() {
        for run in 0..runs {
            seed_set.insert(derive_seed(
                base,
                &[SALT_STREAM, rho_idx as u64, run as u64],
            ));
            expected += 1;
        }
    }

    let mut trials = Vec::new();
    for (mech_idx, &mechanism) in cfg.mechanisms.run.iter().enumerate() {
        let split_slots: Vec<(usize, Option<SplitStrategy>)> = if mechanism.uses_split() {
            cfg.budget
                .splits
                .iter()
                .enumerate()
                .map(|(i, s)| (i, Some(*s)))
                .collect()
        } else {
            // baselines are split-invariant: run them once
            vec![(0, None)]
        };
        for (split_idx, split) in split_slots {
            for (rho_idx, &rho) in cfg.stream.rho.iter().enumerate() {
                for run in 0..runs {
                    seed_set.insert(derive_seed(
                        base,
                        &[
                            SALT_MECHANISM,
                            mech_idx as u64,
                            split_idx as u64,
                            rho_idx as u64,
                            run as u64,
                        ],
                    ));
                    expected += 1;
                    trials.push(Trial {
                        mechanism,
                        mech_idx,
                        split,
                        split_idx,
                        rho,
                        rho_idx,
                        run,
                    });
                }
            }
        }
    }
    if seed_set.len() != expected {
        return Err(Error::config(format!(
            "seed derivation collision: {} distinct seeds for {expected} roles",
            seed_set.len()
        )));
    }

    let engine_config = EngineConfig {
        strategy: cfg.strategy.clone(),
        cache_residual_tol: cfg.mechanisms.cache_residual_tol,
        noiseless: false,
    };

    let records: Result<Vec<TrialRecord>> = trials
        .par_iter()
        .map(|trial| {
            run_trial(cfg, trial, &x, &range_u, &u_rand, &engine_config).map_err(|e| {
                Error::invariant(format!(
                    "trial failed: mechanism={}, split={:?}, rho={}, run={}, seed={}: {e}",
                    trial.mechanism.name(),
                    trial.split.map(|s| s.name()),
                    trial.rho,
                    trial.run,
                    trial_seed(base, trial),
                ))
            })
        })
        .collect();
    let records = records?;

    // aggregate in grid order
    let mut rows = Vec::new();
    for (mech_idx, &mechanism) in cfg.mechanisms.run.iter().enumerate() {
        let split_slots: Vec<Option<SplitStrategy>> = if mechanism.uses_split() {
            cfg.budget.splits.iter().map(|s| Some(*s)).collect()
        } else {
            vec![None]
        };
        for split in split_slots {
            for (rho_idx, &rho) in cfg.stream.rho.iter().enumerate() {
                let cell: Vec<&TrialRecord> = records
                    .iter()
                    .filter(|r| {
                        r.mechanism == mechanism
                            && r.split == split
                            && r.run < runs
                            && (r.rho - rho).abs() < 1e-12
                    })
                    .collect();
                debug_assert_eq!(cell.len(), runs, "cell {mechanism:?} {split:?} {rho_idx}");
                let (mae_m, mae_lo, mae_hi) =
                    aggregate(&cell.iter().map(|r| r.metrics.mae).collect::<Vec<_>>());
                let (rmse_m, rmse_lo, rmse_hi) =
                    aggregate(&cell.iter().map(|r| r.metrics.rmse).collect::<Vec<_>>());
                let (nmae_m, nmae_lo, nmae_hi) =
                    aggregate_optional(&cell.iter().map(|r| r.metrics.nmae).collect::<Vec<_>>());
                let (nrr_m, nrr_lo, nrr_hi) = aggregate_optional(
                    &cell
                        .iter()
                        .map(|r| r.metrics.nrmse_range)
                        .collect::<Vec<_>>(),
                );
                let (mape_m, mape_lo, mape_hi) =
                    aggregate_optional(&cell.iter().map(|r| r.metrics.mape).collect::<Vec<_>>());
                let (smape_m, smape_lo, smape_hi) =
                    aggregate(&cell.iter().map(|r| r.metrics.smape).collect::<Vec<_>>());
                let wasted_m = median_of(&cell.iter().map(|r| r.wasted_eps).collect::<Vec<_>>());
                let refused_m = median_of(
                    &cell
                        .iter()
                        .map(|r| r.metrics.n_refused as f64)
                        .collect::<Vec<_>>(),
                );
                rows.push(ResultRow {
                    mechanism: mechanism.name().to_string(),
                    split: split.map_or("none".to_string(), |s| s.name().to_string()),
                    rho,
                    order: cfg.stream.order.name().to_string(),
                    runs,
                    mae_median: mae_m,
                    mae_min: mae_lo,
                    mae_max: mae_hi,
                    rmse_median: rmse_m,
                    rmse_min: rmse_lo,
                    rmse_max: rmse_hi,
                    nmae_median: nmae_m,
                    nmae_min: nmae_lo,
                    nmae_max: nmae_hi,
                    nrmse_range_median: nrr_m,
                    nrmse_range_min: nrr_lo,
                    nrmse_range_max: nrr_hi,
                    mape_median: mape_m,
                    mape_min: mape_lo,
                    mape_max: mape_hi,
                    smape_median: smape_m,
                    smape_min: smape_lo,
                    smape_max: smape_hi,
                    wasted_eps_median: wasted_m,
                    n_refused_median: refused_m,
                });
                let _ = mech_idx;
            }
        }
    }
    Ok(ExperimentOutput {
        rows,
        trials: records,
    })
}

fn trial_seed(base: u64, trial: &Trial) -> u64 {
    derive_seed(
        base,
        &[
            SALT_MECHANISM,
            trial.mech_idx as u64,
            trial.split_idx as u64,
            trial.rho_idx as u64,
            trial.run as u64,
        ],
    )
}

fn run_trial(
    cfg: &ExperimentConfig,
    trial: &Trial,
    x: &DataVector,
    range_u: &crate::workload::QueryUniverse,
    u_rand: &crate::workload::QueryUniverse,
    engine_config: &EngineConfig,
) -> Result<TrialRecord> {
    let base = cfg.experiment.base_seed;
    let p_seed = derive_seed(base, &[SALT_PREDICTION, trial.run as u64]);
    let stream_seed = derive_seed(base, &[SALT_STREAM, trial.rho_idx as u64, trial.run as u64]);
    let mech_seed = trial_seed(base, trial);

    let p: PredictionSet = oracle_predict(range_u, cfg.universe.prediction_size, p_seed)?;
    let spec = StreamSpec {
        s: cfg.stream.s,
        rho: trial.rho,
        order: cfg.stream.order,
        seed: stream_seed,
    };
    let stream = build_stream(&p, u_rand, &spec)?;
    let mut rng = ChaCha12Rng::seed_from_u64(mech_seed);
    let eps = cfg.budget.eps;
    let delta = cfg.budget.delta;
    let s = cfg.stream.s;

    let (metrics, wasted_eps, online_eps) = match trial.mechanism {
        Mechanism::LaprasStatic | Mechanism::LaprasSmooth | Mechanism::LaprasSmoothCache => {
            let smooth = trial.mechanism != Mechanism::LaprasStatic;
            let split = trial.split.expect("lapras mechanisms carry a split");
            let plan = split_budget(eps, split, smooth)?
                .with_delta_i(delta / (s + 1) as f64)
                .with_eps_min(cfg.budget.eps_min_fraction * eps);
            let run = if trial.mechanism == Mechanism::LaprasSmoothCache {
                process_stream_with_cache(&stream.queries, x, &p, &plan, engine_config, &mut rng)?
            } else {
                process_stream(&stream.queries, x, &p, &plan, engine_config, &mut rng)?
            };
            let (answers, truths) = run.answered_pairs();
            if answers.is_empty() {
                return Err(Error::invariant("trial produced no answered queries"));
            }
            let metrics = compute_metrics(&answers, &truths, run.refused_count())?;
            (metrics, run.trace.wasted_eps, run.trace.online_eps)
        }
        Mechanism::OnlineIndependent => {
            let result = online_independent(&stream.queries, x, eps, delta, &mut rng)?;
            let truths: Vec<f64> = stream.queries.iter().map(|q| x.answer(q)).collect();
            let metrics = compute_metrics(&result.answers, &truths, 0)?;
            (metrics, eps - result.total_eps, result.total_eps)
        }
        Mechanism::OfflineMm => {
            let result = offline_mm(
                &stream.queries,
                x,
                eps,
                delta,
                &engine_config.strategy,
                &mut rng,
            )?;
            let truths: Vec<f64> = stream.queries.iter().map(|q| x.answer(q)).collect();
            let metrics = compute_metrics(&result.answers, &truths, 0)?;
            (metrics, eps - result.total_eps, 0.0)
        }
    };

    Ok(TrialRecord {
        mechanism: trial.mechanism,
        split: trial.split,
        rho: trial.rho,
        run: trial.run,
        seed: mech_seed,
        metrics,
        wasted_eps,
        online_eps,
    })
}

const CSV_HEADER: &str = "mechanism,split,rho,order,runs,\
mae_median,mae_min,mae_max,rmse_median,rmse_min,rmse_max,\
nmae_median,nmae_min,nmae_max,nrmse_range_median,nrmse_range_min,nrmse_range_max,\
mape_median,mape_min,mape_max,smape_median,smape_min,smape_max,\
wasted_eps_median,n_refused_median";

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

fn fmt4_opt(v: Option<f64>) -> String {
    v.map(fmt4).unwrap_or_default()
}

fn csv_line(r: &ResultRow) -> String {
    [
        r.mechanism.clone(),
        r.split.clone(),
        fmt4(r.rho),
        r.order.clone(),
        r.runs.to_string(),
        fmt4(r.mae_median),
        fmt4(r.mae_min),
        fmt4(r.mae_max),
        fmt4(r.rmse_median),
        fmt4(r.rmse_min),
        fmt4(r.rmse_max),
        fmt4_opt(r.nmae_median),
        fmt4_opt(r.nmae_min),
        fmt4_opt(r.nmae_max),
        fmt4_opt(r.nrmse_range_median),
        fmt4_opt(r.nrmse_range_min),
        fmt4_opt(r.nrmse_range_max),
        fmt4_opt(r.mape_median),
        fmt4_opt(r.mape_min),
        fmt4_opt(r.mape_max),
        fmt4(r.smape_median),
        fmt4(r.smape_min),
        fmt4(r.smape_max),
        fmt4(r.wasted_eps_median),
        fmt4(r.n_refused_median),
    ]
    .join(",")
}

/// Write aggregated rows (csv at 4 decimals and/or json at full precision)
/// plus one per-trial plot-data file of (rho, mae) pairs per mechanism/split
/// cell. Returns the written paths.
pub fn emit_results(
    output: &ExperimentOutput,
    formats: &[OutputFormat],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if output.rows.is_empty() {
        return Err(Error::domain("no result rows to emit"));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for format in formats {
        match format {
            OutputFormat::Csv => {
                let path = dir.join("results.csv");
                let mut file = std::fs::File::create(&path)?;
                writeln!(file, "{CSV_HEADER}")?;
                for row in &output.rows {
                    writeln!(file, "{}", csv_line(row))?;
                }
                written.push(path);
            }
            OutputFormat::Json => {
                let path = dir.join("results.json");
                let file = std::fs::File::create(&path)?;
                serde_json::to_writer_pretty(file, &output.rows)
                    .map_err(|e| Error::config(format!("json serialization failed: {e}")))?;
                written.push(path);
            }
        }
    }
    // plot data: one file per (mechanism, split), rho vs per-trial mae
    let mut cells: Vec<(String, String)> = output
        .trials
        .iter()
        .map(|t| {
            (
                t.mechanism.name().to_string(),
                t.split.map_or("none".to_string(), |s| s.name().to_string()),
            )
        })
        .collect();
    cells.sort();
    cells.dedup();
    for (mech, split) in cells {
        let name = if split == "none" {
            format!("plot_{mech}.dat")
        } else {
            format!("plot_{mech}_{split}.dat")
        };
        let path = dir.join(name);
        let mut file = std::fs::File::create(&path)?;
        for t in &output.trials {
            let t_split = t.split.map_or("none".to_string(), |s| s.name().to_string());
            if t.mechanism.name() == mech && t_split == split {
                writeln!(file, "{} {}", t.rho, t.metrics.mae)?;
            }
        }
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetConfig::Synthetic {
                n: 8,
                seed: 5,
                scale: 500.0,
            },
            universe: UniverseConfig {
                prediction_size: 18,
                random_count: 40,
                random_seed: 3,
            },
            stream: StreamSweepConfig {
                s: 16,
                order: StreamOrder::UniformRandom,
                rho: vec![0.0, 0.5, 1.0],
            },
            budget: BudgetConfig {
                eps: 1.0,
                delta: 1e-3,
                eps_min_fraction: 1e-4,
                splits: vec![SplitStrategy::MatrixHeavy, SplitStrategy::QueryHeavy],
            },
            mechanisms: MechanismsConfig {
                run: vec![
                    Mechanism::LaprasStatic,
                    Mechanism::LaprasSmooth,
                    Mechanism::OnlineIndependent,
                    Mechanism::OfflineMm,
                ],
                cache_residual_tol: 1e-6,
            },
            strategy: StrategyConfig {
                optimizer_iterations: 40,
                ..Default::default()
            },
            experiment: RunsConfig {
                runs: 3,
                base_seed: 42,
            },
            output: None,
        }
    }

    #[test]
    fn sweep_is_deterministic() {
        let cfg = tiny_config();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a.rows).unwrap(),
            serde_json::to_string(&b.rows).unwrap()
        );
        // baselines appear once per rho with split "none"
        let baseline_rows: Vec<_> = a
            .rows
            .iter()
            .filter(|r| r.mechanism == "online_independent")
            .collect();
        assert_eq!(baseline_rows.len(), 3);
        assert!(baseline_rows.iter().all(|r| r.split == "none"));
        // lapras rows appear per split per rho
        let lapras_rows = a
            .rows
            .iter()
            .filter(|r| r.mechanism == "lapras_static")
            .count();
        assert_eq!(lapras_rows, 2 * 3);
    }

    #[test]
    fn aggregates_match_sort_oracle() {
        let cfg = tiny_config();
        let out = run_experiment(&cfg).unwrap();
        for row in &out.rows {
            let cell: Vec<&TrialRecord> = out
                .trials
                .iter()
                .filter(|t| {
                    t.mechanism.name() == row.mechanism
                        && t.split.map_or("none".to_string(), |s| s.name().to_string()) == row.split
                        && (t.rho - row.rho).abs() < 1e-12
                })
                .collect();
            assert_eq!(cell.len(), row.runs);
            let mut maes: Vec<f64> = cell.iter().map(|t| t.metrics.mae).collect();
            maes.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = if maes.len() % 2 == 1 {
                maes[maes.len() / 2]
            } else {
                0.5 * (maes[maes.len() / 2 - 1] + maes[maes.len() / 2])
            };
            assert_eq!(median, row.mae_median);
            assert_eq!(maes.first().copied().unwrap(), row.mae_min);
            assert_eq!(maes.last().copied().unwrap(), row.mae_max);
        }
    }

    #[test]
    fn emit_csv_and_json_round_trip() {
        let cfg = tiny_config();
        let out = run_experiment(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths =
            emit_results(&out, &[OutputFormat::Csv, OutputFormat::Json], dir.path()).unwrap();
        assert!(paths.iter().any(|p| p.ends_with("results.csv")));
        let json_path = dir.path().join("results.json");
        let text = std::fs::read_to_string(&json_path).unwrap();
        let back: Vec<ResultRow> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, out.rows);
        // csv has header + one line per row; 4-decimal mae matches json
        let csv_text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        let lines: Vec<&str> = csv_text.lines().collect();
        assert_eq!(lines.len(), out.rows.len() + 1);
        let first = lines[1].split(',').nth(5).unwrap();
        assert_eq!(first, format!("{:.4}", out.rows[0].mae_median));
        // plot files exist per mechanism cell
        assert!(dir.path().join("plot_online_independent.dat").exists());
        assert!(dir
            .path()
            .join("plot_lapras_static_matrix_heavy.dat")
            .exists());
    }

    #[test]
    fn seed_derivation_is_stable_and_spreads() {
        assert_eq!(derive_seed(42, &[1, 2, 3]), derive_seed(42, &[1, 2, 3]));
        assert_ne!(derive_seed(42, &[1, 2, 3]), derive_seed(42, &[1, 3, 2]));
        assert_ne!(derive_seed(42, &[1]), derive_seed(43, &[1]));
        let mut seen = HashSet::new();
        for a in 0..50u64 {
            for b in 0..50u64 {
                seen.insert(derive_seed(7, &[a, b]));
            }
        }
        assert_eq!(seen.len(), 2500);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let text = r#"
[dataset]
kind = "synthetic"
n = 16
seed = 7
scale = 800.0

[universe]
prediction_size = 24
random_count = 50
random_seed = 11

[stream]
s = 24
order = "uniform_random"
rho = [0.0, 1.0]

[budget]
eps = 1.0
delta = 1e-3
splits = ["matrix_heavy"]

[mechanisms]
run = ["lapras_smooth", "online_independent"]

[experiment]
runs = 2
base_seed = 9

[output]
dir = "out"
formats = ["csv", "json"]
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.stream.s, 24);
        assert_eq!(cfg.budget.eps_min_fraction, 1e-4); // default applied
        assert_eq!(cfg.strategy.optimizer_iterations, 500); // default section
        assert_eq!(cfg.mechanisms.run.len(), 2);
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.rows.len(), 2 + 2); // lapras 1 split x 2 rho + baseline x 2 rho
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_config();
        cfg.stream.rho = vec![1.5];
        assert!(run_experiment(&cfg).is_err());
        let mut cfg = tiny_config();
        cfg.experiment.runs = 0;
        assert!(run_experiment(&cfg).is_err());
        let mut cfg = tiny_config();
        cfg.universe.prediction_size = 10_000;
        assert!(run_experiment(&cfg).is_err());
    }
}
