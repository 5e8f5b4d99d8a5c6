//! Command-line driver: experiment sweeps, noise calibration, estimator
//! reports, invariant self-checks, and fixture generation.
//!
//! Exit codes: 0 on success, 1 on configuration errors, 2 on invariant
//! violations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use lapras_core::dp::{agm_sigma, classic_gaussian_sigma, PrivacyParams};
use lapras_core::error::Error;
use lapras_core::estimator::{stopping_estimate, warmup_length};
use lapras_core::experiment::{emit_results, run_experiment, ExperimentConfig, OutputFormat};
use lapras_core::fixtures::{write_adult_like_csv, write_gowalla_like_csv};
use lapras_core::verify;

#[derive(Parser)]
#[command(
    name = "lapras",
    about = "Learning-augmented differentially private answering of linear query streams",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment sweep described by a TOML config file.
    Run {
        config: PathBuf,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the analytic Gaussian noise scale for a privacy budget.
    Calibrate {
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 1.0)]
        sensitivity: f64,
    },
    /// Monte Carlo report on the stopping-time bad-count estimator.
    Estimate {
        /// Stream length.
        #[arg(long)]
        s: usize,
        /// True bad-query count.
        #[arg(long)]
        b: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the invariant self-check suites (ledger fuzz, budget soundness,
    /// unbiasedness enumeration).
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write the bundled synthetic CSV fixtures.
    Fixtures {
        #[arg(long, default_value = "fixtures")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Invariant(_) | Error::BudgetExceeded { .. } | Error::Calibration(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::Run {
            config,
            seed,
            out_dir,
        } => run_sweep(&config, seed, out_dir),
        Command::Calibrate {
            eps,
            delta,
            sensitivity,
        } => calibrate(eps, delta, sensitivity),
        Command::Estimate { s, b, trials, seed } => estimate(s, b, trials, seed),
        Command::Verify { seed } => run_verify(seed),
        Command::Fixtures { out_dir } => fixtures(&out_dir),
    }
}

fn run_sweep(path: &Path, seed: Option<u64>, out_dir: Option<PathBuf>) -> Result<(), Error> {
    let mut config = ExperimentConfig::from_path(path)?;
    if let Some(seed) = seed {
        config.experiment.base_seed = seed;
    }
    let output = run_experiment(&config)?;
    let (dir, formats) = match (&out_dir, &config.output) {
        (Some(dir), Some(out)) => (dir.clone(), out.formats.clone()),
        (Some(dir), None) => (dir.clone(), vec![OutputFormat::Csv, OutputFormat::Json]),
        (None, Some(out)) => (PathBuf::from(&out.dir), out.formats.clone()),
        (None, None) => (
            PathBuf::from("out"),
            vec![OutputFormat::Csv, OutputFormat::Json],
        ),
    };
    let written = emit_results(&output, &formats, &dir)?;
    println!(
        "{} trials aggregated into {} rows (base seed {})",
        output.trials.len(),
        output.rows.len(),
        config.experiment.base_seed
    );
    for row in &output.rows {
        println!(
            "  {:<20} {:<13} rho={:<4} median MAE {:.4}",
            row.mechanism, row.split, row.rho, row.mae_median
        );
    }
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn calibrate(eps: f64, delta: f64, sensitivity: f64) -> Result<(), Error> {
    let params = PrivacyParams::new(eps, delta)?;
    let analytic = agm_sigma(sensitivity, &params)?;
    println!("sigma_analytic = {:.6}", analytic.sigma());
    if eps < 1.0 {
        let classical = classic_gaussian_sigma(sensitivity, &params)?;
        println!("sigma_classical = {:.6}", classical.sigma());
    }
    Ok(())
}

fn estimate(s: usize, b: usize, trials: usize, seed: u64) -> Result<(), Error> {
    if b > s {
        return Err(Error::config(format!(
            "bad count {b} exceeds stream length {s}"
        )));
    }
    let t = warmup_length(s)?;
    if b < t {
        return Err(Error::config(format!(
            "the estimate never locks when B < T (B = {b}, T = {t}); \
             the mechanism would leave its paced budget unspent"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        let mut positions: Vec<usize> = rand::seq::index::sample(&mut rng, s, b)
            .into_iter()
            .collect();
        let (_, &mut lth, _) = positions.select_nth_unstable(t - 1);
        let est = stopping_estimate(s, t, lth + 1)?;
        sum += est;
        sum_sq += est * est;
    }
    let mean = sum / trials as f64;
    let var = sum_sq / trials as f64 - mean * mean;
    let se = (var / trials as f64).sqrt();
    println!("S = {s}, B = {b}, T = {t}, trials = {trials}");
    println!("mean estimate   = {mean:.4} (true B = {b}, SE = {se:.4})");
    println!("sample variance = {var:.4}");
    if t >= 3 {
        let bound = (s * (t - 1)) as f64 / ((s - 1) * (t - 2)) as f64 * (b * (b - 1)) as f64
            - (b * b) as f64;
        println!("variance bound  = {bound:.4}");
    } else {
        println!("variance bound  = n/a (requires T >= 3)");
    }
    Ok(())
}

fn run_verify(seed: u64) -> Result<(), Error> {
    println!("{}", verify::ledger_fuzz(2000, seed)?);
    println!(
        "{}",
        verify::smooth_soundness_fuzz(2000, 2000, seed.wrapping_add(1))?
    );
    println!("{}", verify::unbiasedness_enumeration(12)?);
    println!("all invariant suites passed");
    Ok(())
}

fn fixtures(out_dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(out_dir)?;
    let adult = out_dir.join("adult_like.csv");
    write_adult_like_csv(&adult, 3000, 1)?;
    println!("wrote {}", adult.display());
    let gowalla = out_dir.join("gowalla_like.csv");
    write_gowalla_like_csv(&gowalla, 2000, 2)?;
    println!("wrote {}", gowalla.display());
    Ok(())
}
