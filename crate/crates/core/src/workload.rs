//! Query universes, oracle prediction sets, stream construction with
//! controlled overlap and ordering, and dataset ingestion into histograms.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::engine::PredictionSet;
use crate::error::{Error, Result};
use crate::types::{CanonicalQuery, DataVector, Query};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniverseKind {
    Range,
    RandomBinary,
}

/// A fixed collection of candidate queries over an n-bin domain.
#[derive(Debug, Clone)]
pub struct QueryUniverse {
    pub kind: UniverseKind,
    pub n: usize,
    pub queries: Vec<Query>,
    pub seed: Option<u64>,
}

impl QueryUniverse {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// All contiguous half-open intervals [i, j) over n bins, in lexicographic
/// (i, j) order; n(n+1)/2 queries.
pub fn range_universe(n: usize) -> Result<QueryUniverse> {
    if n < 1 {
        return Err(Error::domain("domain size must be >= 1"));
    }
    let mut queries = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in (i + 1)..=n {
            let mut q = vec![0.0; n];
            q[i..j].iter_mut().for_each(|v| *v = 1.0);
            queries.push(q);
        }
    }
    Ok(QueryUniverse {
        kind: UniverseKind::Range,
        n,
        queries,
        seed: None,
    })
}

/// `count` distinct random 0/1 queries (each coordinate Bernoulli(1/2)),
/// rejection-resampled on duplicates and the all-zero vector. Deterministic
/// given the seed.
pub fn random_binary_universe(n: usize, count: usize, seed: u64) -> Result<QueryUniverse> {
    if n < 1 {
        return Err(Error::domain("domain size must be >= 1"));
    }
    if count < 1 {
        return Err(Error::config("random universe size must be >= 1"));
    }
    // 2^n - 1 nonzero binary vectors exist
    if n < 63 && count as u128 > (1u128 << n) - 1 {
        return Err(Error::config(format!(
            "cannot draw {count} distinct nonzero binary queries over {n} bins"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut queries = Vec::with_capacity(count);
    while queries.len() < count {
        let q: Query = (0..n)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 })
            .collect();
        if q.iter().all(|&v| v == 0.0) {
            continue;
        }
        if seen.insert(CanonicalQuery::from_coefficients(&q)) {
            queries.push(q);
        }
    }
    Ok(QueryUniverse {
        kind: UniverseKind::RandomBinary,
        n,
        queries,
        seed: Some(seed),
    })
}

/// Oracle stand-in: a prediction set drawn uniformly without replacement
/// from the universe. Deterministic given the seed.
pub fn oracle_predict(universe: &QueryUniverse, size: usize, seed: u64) -> Result<PredictionSet> {
    if size > universe.len() {
        return Err(Error::config(format!(
            "prediction size {size} exceeds universe size {}",
            universe.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, universe.len(), size);
    Ok(PredictionSet::new(
        picked.iter().map(|i| universe.queries[i].clone()),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamOrder {
    UniformRandom,
    BadFirst,
}

impl StreamOrder {
    pub fn name(&self) -> &'static str {
        match self {
            StreamOrder::UniformRandom => "uniform_random",
            StreamOrder::BadFirst => "bad_first",
        }
    }
}

impl std::str::FromStr for StreamOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_random" => Ok(StreamOrder::UniformRandom),
            "bad_first" => Ok(StreamOrder::BadFirst),
            other => Err(Error::config(format!("unknown stream order '{other}'"))),
        }
    }
}

/// Recipe for one realized stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    /// Stream length.
    pub s: usize,
    /// Overlap fraction: floor(rho * S) queries come from the prediction set.
    pub rho: f64,
    pub order: StreamOrder,
    pub seed: u64,
}

/// A realized stream plus composition metadata.
#[derive(Debug, Clone)]
pub struct Stream {
    pub queries: Vec<Query>,
    /// How many entries were drawn from the prediction set.
    pub from_prediction: usize,
    /// Queries not in P at answer time (collisions between the random
    /// universe and P count as predicted).
    pub realized_bad: usize,
}

/// Draw floor(rho S) queries from P and the remainder from the random
/// universe, both without replacement, then order them: a uniformly random
/// permutation, or all unpredicted queries first (blocks shuffled
/// internally).
pub fn build_stream(
    p: &PredictionSet,
    u_rand: &QueryUniverse,
    spec: &StreamSpec,
) -> Result<Stream> {
    if spec.s < 1 {
        return Err(Error::config("stream length must be >= 1"));
    }
    if !(0.0..=1.0).contains(&spec.rho) {
        return Err(Error::config(format!(
            "overlap must lie in [0, 1], got {}",
            spec.rho
        )));
    }
    let from_p = (spec.rho * spec.s as f64).floor() as usize;
    let from_rand = spec.s - from_p;
    if from_p > p.len() {
        return Err(Error::config(format!(
            "need {from_p} predicted queries but P has only {}",
            p.len()
        )));
    }
    if from_rand > u_rand.len() {
        return Err(Error::config(format!(
            "need {from_rand} unpredicted queries but the universe has only {}",
            u_rand.len()
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let good_picks = rand::seq::index::sample(&mut rng, p.len(), from_p);
    let mut good: Vec<Query> = good_picks.iter().map(|i| p.queries()[i].clone()).collect();
    let rand_picks = rand::seq::index::sample(&mut rng, u_rand.len(), from_rand);
    let mut bad: Vec<Query> = rand_picks
        .iter()
        .map(|i| u_rand.queries[i].clone())
        .collect();

    let queries = match spec.order {
        StreamOrder::UniformRandom => {
            let mut all = Vec::with_capacity(spec.s);
            all.append(&mut bad);
            all.append(&mut good);
            all.shuffle(&mut rng);
            all
        }
        StreamOrder::BadFirst => {
            bad.shuffle(&mut rng);
            good.shuffle(&mut rng);
            let mut all = bad;
            all.append(&mut good);
            all
        }
    };
    let realized_bad = queries.iter().filter(|q| !p.contains(q)).count();
    Ok(Stream {
        queries,
        from_prediction: from_p,
        realized_bad,
    })
}

/// Histogram binning rule for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binning {
    /// One bin per distinct value, ordered by sorted label.
    Categorical,
    /// `bins` right-open fixed-width bins over [lo, hi]; the last bin is
    /// closed. Out-of-range values are dropped (counted and logged).
    FixedWidth { bins: usize, lo: f64, hi: f64 },
}

/// Build a univariate histogram from a CSV column (comma-separated,
/// first row headers, UTF-8). Bin order is deterministic: sorted category
/// labels, or ascending bin edges.
pub fn ingest_histogram(path: &Path, column: &str, binning: &Binning) -> Result<DataVector> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Ingest(format!("cannot read headers: {e}")))?;
    let col = headers.iter().position(|h| h == column).ok_or_else(|| {
        Error::Ingest(format!("column '{column}' not found in {}", path.display()))
    })?;

    match binning {
        Binning::Categorical => {
            let mut counts: BTreeMap<String, u64> = BTreeMap::new();
            for (i, record) in reader.records().enumerate() {
                let row = i + 2; // 1-based, after the header row
                let record = record.map_err(|e| Error::Ingest(format!("row {row}: {e}")))?;
                let value = record
                    .get(col)
                    .ok_or_else(|| Error::Ingest(format!("row {row}: missing field")))?;
                *counts.entry(value.to_string()).or_insert(0) += 1;
            }
            if counts.is_empty() {
                return Err(Error::Ingest("no rows ingested".into()));
            }
            DataVector::new(counts.values().map(|&c| c as f64).collect())
        }
        Binning::FixedWidth { bins, lo, hi } => {
            if *bins == 0 || hi <= lo || hi.is_nan() || lo.is_nan() {
                return Err(Error::config(format!(
                    "fixed-width binning needs bins >= 1 and hi > lo, got bins={bins}, [{lo}, {hi}]"
                )));
            }
            let width = (hi - lo) / *bins as f64;
            let mut counts = vec![0u64; *bins];
            let mut dropped = 0usize;
            let mut kept = 0usize;
            for (i, record) in reader.records().enumerate() {
                let row = i + 2;
                let record = record.map_err(|e| Error::Ingest(format!("row {row}: {e}")))?;
                let raw = record
                    .get(col)
                    .ok_or_else(|| Error::Ingest(format!("row {row}: missing field")))?;
                let value: f64 = raw
                    .trim()
                    .parse()
                    .map_err(|e| Error::Ingest(format!("row {row}: cannot parse '{raw}': {e}")))?;
                if !(*lo..=*hi).contains(&value) {
                    dropped += 1;
                    continue;
                }
                let idx = if value == *hi {
                    bins - 1 // last bin is closed on the right
                } else {
                    (((value - lo) / width).floor() as usize).min(bins - 1)
                };
                counts[idx] += 1;
                kept += 1;
            }
            if dropped > 0 {
                log::warn!("ingest: dropped {dropped} out-of-range values from {column}");
            }
            if kept == 0 {
                return Err(Error::Ingest("no rows ingested".into()));
            }
            DataVector::new(counts.iter().map(|&c| c as f64).collect())
        }
    }
}

/// Dump queries one per line, space-separated coefficients.
pub fn dump_queries(path: &Path, queries: &[Query]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for q in queries {
        let line: Vec<String> = q.iter().map(|v| format!("{v}")).collect();
        writeln!(file, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Read back a query dump written by [`dump_queries`].
pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let file = std::fs::File::open(path)?;
    let mut queries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: std::result::Result<Query, _> =
            line.split_whitespace().map(|t| t.parse::<f64>()).collect();
        queries.push(q.map_err(|e| Error::Ingest(format!("line {}: {e}", i + 1)))?);
    }
    Ok(queries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_universe_reference() {
        let u = range_universe(2).unwrap();
        assert_eq!(
            u.queries,
            vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]]
        );
        assert_eq!(range_universe(3).unwrap().len(), 6);
        let u8 = range_universe(8).unwrap();
        assert_eq!(u8.len(), 36);
        for q in &u8.queries {
            // contiguous block of ones
            let ones: Vec<usize> = q
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1.0)
                .map(|(i, _)| i)
                .collect();
            assert!(!ones.is_empty());
            assert_eq!(ones.last().unwrap() - ones[0] + 1, ones.len());
            assert!(q.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn random_binary_deterministic_and_nonzero() {
        let a = random_binary_universe(10, 25, 99).unwrap();
        let b = random_binary_universe(10, 25, 99).unwrap();
        assert_eq!(a.queries, b.queries);
        assert!(a.queries.iter().all(|q| q.contains(&1.0)));
        let mut seen = std::collections::HashSet::new();
        for q in &a.queries {
            assert!(seen.insert(CanonicalQuery::from_coefficients(q)));
        }
    }

    #[test]
    fn random_binary_exhausts_small_domain() {
        let u = random_binary_universe(2, 3, 1).unwrap();
        assert_eq!(u.len(), 3); // all three nonzero vectors
        assert!(random_binary_universe(2, 4, 1).is_err());
    }

    #[test]
    fn oracle_sampling_is_deterministic_and_bounded() {
        let u = range_universe(6).unwrap();
        let p1 = oracle_predict(&u, 5, 3).unwrap();
        let p2 = oracle_predict(&u, 5, 3).unwrap();
        assert_eq!(p1.queries(), p2.queries());
        assert_eq!(p1.len(), 5);
        assert_eq!(oracle_predict(&u, 0, 3).unwrap().len(), 0);
        assert_eq!(oracle_predict(&u, u.len(), 3).unwrap().len(), u.len());
        assert!(oracle_predict(&u, u.len() + 1, 3).is_err());
    }

    #[test]
    fn oracle_sampling_is_near_uniform() {
        let u = range_universe(4).unwrap(); // 10 queries
        let size = 3;
        let trials = 10_000;
        let mut hits = vec![0usize; u.len()];
        for seed in 0..trials {
            let p = oracle_predict(&u, size, seed).unwrap();
            for (i, q) in u.queries.iter().enumerate() {
                if p.contains(q) {
                    hits[i] += 1;
                }
            }
        }
        let expected = size as f64 / u.len() as f64;
        let se = (expected * (1.0 - expected) / trials as f64).sqrt();
        for (i, &h) in hits.iter().enumerate() {
            let freq = h as f64 / trials as f64;
            assert!(
                (freq - expected).abs() <= 3.0 * se,
                "query {i}: freq {freq} vs expected {expected}"
            );
        }
    }

    #[test]
    fn stream_composition_is_exact() {
        let universe = range_universe(10).unwrap();
        let p = oracle_predict(&universe, 20, 5).unwrap();
        let u_rand = random_binary_universe(10, 40, 7).unwrap();
        for (k, rho) in (0..=10).map(|k| (k, k as f64 / 10.0)) {
            let spec = StreamSpec {
                s: 30,
                rho,
                order: StreamOrder::UniformRandom,
                seed: k,
            };
            if (rho * 30.0).floor() as usize > p.len() {
                continue;
            }
            let stream = build_stream(&p, &u_rand, &spec).unwrap();
            assert_eq!(stream.queries.len(), 30);
            assert_eq!(stream.from_prediction, (rho * 30.0).floor() as usize);
            let in_p = stream.queries.iter().filter(|q| p.contains(q)).count();
            assert_eq!(stream.realized_bad, 30 - in_p);
        }
    }

    #[test]
    fn stream_is_deterministic() {
        let universe = range_universe(8).unwrap();
        let p = oracle_predict(&universe, 12, 1).unwrap();
        let u_rand = random_binary_universe(8, 30, 2).unwrap();
        let spec = StreamSpec {
            s: 20,
            rho: 0.5,
            order: StreamOrder::UniformRandom,
            seed: 77,
        };
        let a = build_stream(&p, &u_rand, &spec).unwrap();
        let b = build_stream(&p, &u_rand, &spec).unwrap();
        assert_eq!(a.queries, b.queries);
    }

    #[test]
    fn bad_first_puts_unpredicted_before_predicted() {
        let universe = range_universe(8).unwrap();
        let p = oracle_predict(&universe, 12, 1).unwrap();
        let u_rand = random_binary_universe(8, 30, 2).unwrap();
        let spec = StreamSpec {
            s: 20,
            rho: 0.5,
            order: StreamOrder::BadFirst,
            seed: 9,
        };
        let stream = build_stream(&p, &u_rand, &spec).unwrap();
        // the first block comes from u_rand; membership may only flip
        // bad -> good once (collisions with P still count as predicted)
        let classes: Vec<bool> = stream.queries.iter().map(|q| p.contains(q)).collect();
        let first_good = classes.iter().position(|&g| g).unwrap_or(classes.len());
        // all u_rand-sourced entries sit in the first 10 slots
        assert!(
            first_good
                >= 10
                    - stream.queries[..10]
                        .iter()
                        .filter(|q| p.contains(q))
                        .count()
        );
        assert_eq!(classes[10..].iter().filter(|&&g| g).count(), 10);
    }

    #[test]
    fn stopping_position_mean_matches_nhg_expectation() {
        // E[L] = T + T G / (B + 1) for the T-th bad arrival under uniform order
        let universe = range_universe(12).unwrap();
        let p = oracle_predict(&universe, 30, 4).unwrap();
        let u_rand = random_binary_universe(12, 40, 6).unwrap();
        let s = 40;
        let rho = 0.5;
        let t = 4usize;
        let mut total_l = 0.0;
        let mut trials = 0.0;
        for seed in 0..10_000u64 {
            let spec = StreamSpec {
                s,
                rho,
                order: StreamOrder::UniformRandom,
                seed,
            };
            let stream = build_stream(&p, &u_rand, &spec).unwrap();
            let b = stream.realized_bad;
            if b < t {
                continue;
            }
            let g = s - b;
            let mut bad_seen = 0;
            let mut l = 0;
            for (i, q) in stream.queries.iter().enumerate() {
                if !p.contains(q) {
                    bad_seen += 1;
                    if bad_seen == t {
                        l = i + 1;
                        break;
                    }
                }
            }
            // collisions shift (B, G) per stream; accumulate the deviation
            // from the per-stream expectation instead of a global constant
            let expected = t as f64 + (t * g) as f64 / (b + 1) as f64;
            total_l += l as f64 - expected;
            trials += 1.0;
        }
        let bias = total_l / trials;
        assert!(
            bias.abs() < 0.2,
            "mean deviation from NHG expectation: {bias}"
        );
    }

    fn write_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn ingest_categorical_counts() {
        let f = write_csv("name,grp\nr1,a\nr2,a\nr3,b\n");
        let x = ingest_histogram(f.path(), "grp", &Binning::Categorical).unwrap();
        assert_eq!(x.as_slice(), &[2.0, 1.0]);
        assert_eq!(x.total(), 3.0);
    }

    #[test]
    fn ingest_categorical_is_order_independent() {
        let a = write_csv("v\nz\na\nz\nm\n");
        let b = write_csv("v\nm\nz\na\nz\n");
        let xa = ingest_histogram(a.path(), "v", &Binning::Categorical).unwrap();
        let xb = ingest_histogram(b.path(), "v", &Binning::Categorical).unwrap();
        assert_eq!(xa, xb);
    }

    #[test]
    fn ingest_fixed_width_reference() {
        // two right-open bins over [1, 9]: [1,5) and [5,9] (last closed)
        // values 1, 5, 9 land as [1, 2]
        let f = write_csv("v\n1\n5\n9\n");
        let binning = Binning::FixedWidth {
            bins: 2,
            lo: 1.0,
            hi: 9.0,
        };
        let x = ingest_histogram(f.path(), "v", &binning).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn ingest_fixed_width_drops_out_of_range() {
        let f = write_csv("v\n0.5\n2\n100\n");
        let binning = Binning::FixedWidth {
            bins: 2,
            lo: 1.0,
            hi: 9.0,
        };
        let x = ingest_histogram(f.path(), "v", &binning).unwrap();
        assert_eq!(x.total(), 1.0);
    }

    #[test]
    fn ingest_errors_are_reported_with_rows() {
        let f = write_csv("v\n1\nnot_a_number\n");
        let binning = Binning::FixedWidth {
            bins: 2,
            lo: 0.0,
            hi: 10.0,
        };
        let err = ingest_histogram(f.path(), "v", &binning).unwrap_err();
        assert!(err.to_string().contains("row 3"), "got: {err}");
        let missing = ingest_histogram(f.path(), "absent", &Binning::Categorical).unwrap_err();
        assert!(missing.to_string().contains("absent"));
    }

    #[test]
    fn query_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queries.txt");
        let queries = vec![vec![1.0, 0.0, 1.0], vec![0.5, -2.25, 0.0]];
        dump_queries(&path, &queries).unwrap();
        let back = load_queries(&path).unwrap();
        assert_eq!(back, queries);
    }
}
