//! Seeded synthetic data: histograms and CSV fixtures standing in for the
//! census-style and check-in-style datasets, so runs need no downloads.
//! Generators are deterministic given their seeds.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Zipf};

use crate::error::Result;
use crate::types::DataVector;

/// A bimodal histogram with roughly `scale` total count: a broad main mode
/// around n/3 and a narrower secondary mode around 2n/3, with seeded
/// per-bin jitter.
pub fn synthetic_histogram(n: usize, scale: f64, seed: u64) -> Result<DataVector> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let nf = n as f64;
    let weights: Vec<f64> = (0..n)
        .map(|i| {
            let z1 = (i as f64 - nf / 3.0) / (nf / 5.0);
            let z2 = (i as f64 - 2.0 * nf / 3.0) / (nf / 8.0);
            let shape = (-0.5 * z1 * z1).exp() + 0.35 * (-0.5 * z2 * z2).exp() + 0.02;
            shape * rng.gen_range(0.85..1.15)
        })
        .collect();
    let total: f64 = weights.iter().sum();
    DataVector::new(
        weights
            .iter()
            .map(|w| (scale * w / total).round())
            .collect(),
    )
}

const COUNTRIES: [&str; 20] = [
    "US", "MX", "PH", "DE", "CA", "IN", "GB", "PR", "SV", "CU", "CN", "JM", "IT", "DO", "JP", "GT",
    "CO", "PL", "VN", "HT",
];

/// Census-style rows: an `age` column (normal around 38, clamped to 17..=90)
/// and a `country` column (Zipf over 20 codes).
pub fn write_adult_like_csv(path: &Path, rows: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let age_dist = Normal::new(38.0, 13.0).expect("valid normal");
    let country_dist = Zipf::new(COUNTRIES.len() as u64, 1.2).expect("valid zipf");
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "age,country")?;
    for _ in 0..rows {
        let sampled: f64 = age_dist.sample(&mut rng);
        let age = (sampled.round() as i64).clamp(17, 90);
        let country = COUNTRIES[country_dist.sample(&mut rng) as usize - 1];
        writeln!(file, "{age},{country}")?;
    }
    Ok(())
}

/// Check-in-style rows: a `location` column over 100 location ids with a
/// Zipf popularity profile.
pub fn write_gowalla_like_csv(path: &Path, rows: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let loc_dist = Zipf::new(100, 1.1).expect("valid zipf");
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "location")?;
    for _ in 0..rows {
        let loc = loc_dist.sample(&mut rng) as usize - 1;
        writeln!(file, "loc_{loc:03}")?;
    }
    Ok(())
}
