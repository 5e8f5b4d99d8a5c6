//! Shared setup for the criterion benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use lapras_core::allocation::{split_budget, BudgetPlan, SplitStrategy};
use lapras_core::engine::PredictionSet;
use lapras_core::types::{DataVector, Query};
use lapras_core::workload::{
    build_stream, oracle_predict, random_binary_universe, range_universe, StreamOrder, StreamSpec,
};

pub struct StreamSetup {
    pub x: DataVector,
    pub p: PredictionSet,
    pub stream: Vec<Query>,
    pub plan: BudgetPlan,
}

/// A moderate-overlap stream over a 32-bin domain, sized for steady-state
/// benchmarking of the full per-query path.
pub fn stream_setup(s: usize, rho: f64, seed: u64) -> StreamSetup {
    let n = 32;
    let x = lapras_core::fixtures::synthetic_histogram(n, 2000.0, seed).unwrap();
    let universe = range_universe(n).unwrap();
    let p = oracle_predict(&universe, s.min(universe.len()), seed).unwrap();
    let u_rand = random_binary_universe(n, s, seed + 1).unwrap();
    let spec = StreamSpec {
        s,
        rho,
        order: StreamOrder::UniformRandom,
        seed: seed + 2,
    };
    let stream = build_stream(&p, &u_rand, &spec).unwrap().queries;
    let plan = split_budget(1.0, SplitStrategy::MatrixHeavy, true)
        .unwrap()
        .with_delta_i(1e-3 / (s + 1) as f64);
    StreamSetup { x, p, stream, plan }
}

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
