//! Error metrics over answered queries. Refused queries are counted, never
//! imputed, and never enter any denominator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute and scale-free error metrics for one run. Metrics whose
/// denominator degenerates (zero truth range, all-zero truths) are absent
/// rather than infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub mae: f64,
    pub rmse: f64,
    /// MAE normalized by the mean true answer.
    pub nmae: Option<f64>,
    /// RMSE normalized by the true-answer range (max - min).
    pub nrmse_range: Option<f64>,
    /// Mean absolute percentage error over nonzero truths.
    pub mape: Option<f64>,
    /// Symmetric MAPE; terms with |a| + |t| = 0 contribute zero.
    pub smape: f64,
    pub n_answered: usize,
    pub n_refused: usize,
}

pub fn compute_metrics(answers: &[f64], truths: &[f64], n_refused: usize) -> Result<ErrorReport> {
    if answers.is_empty() || answers.len() != truths.len() {
        return Err(Error::domain(format!(
            "need equal-length nonempty answer/truth vectors, got {} and {}",
            answers.len(),
            truths.len()
        )));
    }
    let n = answers.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut smape_sum = 0.0;
    let mut mape_sum = 0.0;
    let mut mape_count = 0usize;
    for (&a, &t) in answers.iter().zip(truths) {
        let err = (a - t).abs();
        abs_sum += err;
        sq_sum += err * err;
        let denom = a.abs() + t.abs();
        if denom > 0.0 {
            smape_sum += 2.0 * err / denom;
        }
        if t != 0.0 {
            mape_sum += err / t.abs();
            mape_count += 1;
        }
    }
    let mae = abs_sum / n;
    let rmse = (sq_sum / n).sqrt();
    let mean_t = truths.iter().sum::<f64>() / n;
    let nmae = if mean_t != 0.0 {
        Some(mae / mean_t)
    } else {
        None
    };
    let range = truths.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - truths.iter().cloned().fold(f64::INFINITY, f64::min);
    let nrmse_range = if range > 0.0 {
        Some(rmse / range)
    } else {
        None
    };
    let mape = if mape_count > 0 {
        Some(mape_sum / mape_count as f64)
    } else {
        None
    };
    Ok(ErrorReport {
        mae,
        rmse,
        nmae,
        nrmse_range,
        mape,
        smape: smape_sum / n,
        n_answered: answers.len(),
        n_refused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        let r = compute_metrics(&[2.0, 4.0], &[1.0, 2.0], 0).unwrap();
        assert!((r.mae - 1.5).abs() < 1e-15);
        assert!((r.rmse - 2.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.n_answered, 2);
    }

    #[test]
    fn perfect_answers_zero_all_metrics() {
        let t = [3.0, 7.0, 1.0];
        let r = compute_metrics(&t, &t, 2).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.nmae, Some(0.0));
        assert_eq!(r.nrmse_range, Some(0.0));
        assert_eq!(r.mape, Some(0.0));
        assert_eq!(r.smape, 0.0);
        assert_eq!(r.n_refused, 2);
    }

    #[test]
    fn constant_offset() {
        let truths = [1.0, 2.0, 3.0];
        let answers: Vec<f64> = truths.iter().map(|t| t + 0.5).collect();
        let r = compute_metrics(&answers, &truths, 0).unwrap();
        assert!((r.mae - 0.5).abs() < 1e-15);
        assert!(r.smape > 0.0);
    }

    #[test]
    fn degenerate_denominators_are_absent() {
        // zero range -> no nrmse
        let r = compute_metrics(&[1.0, 2.0], &[5.0, 5.0], 0).unwrap();
        assert!(r.nrmse_range.is_none());
        assert!(r.nmae.is_some());
        // all-zero truths -> no mape, no nmae; smape still defined
        let r = compute_metrics(&[1.0, 0.0], &[0.0, 0.0], 0).unwrap();
        assert!(r.mape.is_none());
        assert!(r.nmae.is_none());
        assert!((r.smape - 1.0).abs() < 1e-15); // one term 2|1|/(1+0)=2, one 0
    }

    #[test]
    fn rejects_mismatched_inputs() {
        assert!(compute_metrics(&[], &[], 0).is_err());
        assert!(compute_metrics(&[1.0], &[1.0, 2.0], 0).is_err());
    }
}
