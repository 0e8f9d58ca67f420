//! Evaluation metrics for comparing model estimates against known truth:
//! root mean square error, the Gneiting-Raftery interval score, interval
//! coverage, and the data-preparation helpers (log-scale delta method and
//! margin-of-error conversion).

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("estimate {0} must be positive for the log transform")]
    NonPositiveEstimate(f64),
    #[error("confidence level {0} must lie in (0, 1)")]
    BadLevel(f64),
    #[error("interval [{lower}, {upper}] is inverted")]
    InvertedInterval { lower: f64, upper: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// First-order delta method for the log transform: returns
/// (log y, se / y).
pub fn delta_log(y: f64, se: f64) -> Result<(f64, f64), MetricsError> {
    if !(y > 0.0) {
        return Err(MetricsError::NonPositiveEstimate(y));
    }
    if !(se > 0.0) {
        return Err(MetricsError::NonPositiveEstimate(se));
    }
    Ok((y.ln(), se / y))
}

/// The z divisor for a symmetric margin of error at the given two-sided
/// confidence level (1.645 at 90%).
pub fn moe_divisor(level: f64) -> Result<f64, MetricsError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(MetricsError::BadLevel(level));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 * (1.0 + level)))
}

/// Converts a margin of error to a standard error: se = moe / z.
pub fn moe_to_se(moe: f64, level: f64) -> Result<f64, MetricsError> {
    if moe < 0.0 {
        return Err(MetricsError::BadLevel(level));
    }
    Ok(moe / moe_divisor(level)?)
}

/// Root mean squared error between aligned slices.
pub fn rmse(estimates: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} estimates vs {} truths",
            estimates.len(),
            truth.len()
        )));
    }
    let mse = estimates
        .iter()
        .zip(truth.iter())
        .map(|(&e, &t)| (e - t) * (e - t))
        .sum::<f64>()
        / estimates.len() as f64;
    Ok(mse.sqrt())
}

/// Interval score of a central (1-alpha) interval at one point:
/// (u - l) + (2/alpha)(l - x) if x < l, plus (2/alpha)(x - u) if x > u.
pub fn interval_score(lower: f64, upper: f64, x: f64, alpha: f64) -> Result<f64, MetricsError> {
    if lower > upper {
        return Err(MetricsError::InvertedInterval { lower, upper });
    }
    let mut score = upper - lower;
    if x < lower {
        score += 2.0 / alpha * (lower - x);
    }
    if x > upper {
        score += 2.0 / alpha * (x - upper);
    }
    Ok(score)
}

/// Mean interval score over aligned slices.
pub fn mean_interval_score(
    lower: &[f64],
    upper: &[f64],
    truth: &[f64],
    alpha: f64,
) -> Result<f64, MetricsError> {
    if lower.len() != truth.len() || upper.len() != truth.len() || truth.is_empty() {
        return Err(MetricsError::ShapeMismatch(
            "interval/truth length mismatch".into(),
        ));
    }
    let mut acc = 0.0;
    for i in 0..truth.len() {
        acc += interval_score(lower[i], upper[i], truth[i], alpha)?;
    }
    Ok(acc / truth.len() as f64)
}

/// Fraction of truths falling inside their intervals.
pub fn coverage(lower: &[f64], upper: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    if lower.len() != truth.len() || upper.len() != truth.len() || truth.is_empty() {
        return Err(MetricsError::ShapeMismatch(
            "interval/truth length mismatch".into(),
        ));
    }
    let hits = truth
        .iter()
        .enumerate()
        .filter(|(i, &t)| lower[*i] <= t && t <= upper[*i])
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn delta_log_examples() {
        let (ly, lse) = delta_log(100.0, 10.0).unwrap();
        assert_abs_diff_eq!(ly, 4.60517, epsilon = 1e-5);
        assert_abs_diff_eq!(lse, 0.1, epsilon = 1e-12);
        let (ly, lse) = delta_log(1.0, 1.0).unwrap();
        assert_abs_diff_eq!(ly, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(lse, 1.0, epsilon = 1e-15);
        assert!(matches!(
            delta_log(-5.0, 1.0),
            Err(MetricsError::NonPositiveEstimate(_))
        ));
    }

    #[test]
    fn moe_conversion_examples() {
        assert_abs_diff_eq!(moe_to_se(1.645, 0.90).unwrap(), 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(moe_to_se(0.0, 0.5).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(moe_to_se(1.959964, 0.95).unwrap(), 1.0, epsilon = 1e-5);
        assert!(moe_to_se(1.0, 1.5).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_abs_diff_eq!(
            rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(),
            (12.5_f64).sqrt(),
            epsilon = 1e-12
        );
        // shift invariance
        let a = rmse(&[1.0, 5.0], &[2.0, 3.0]).unwrap();
        let b = rmse(&[11.0, 15.0], &[12.0, 13.0]).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn interval_score_examples() {
        assert_abs_diff_eq!(
            interval_score(0.0, 1.0, 0.5, 0.05).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            interval_score(0.0, 1.0, 1.5, 0.05).unwrap(),
            21.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            interval_score(0.0, 1.0, -0.25, 0.05).unwrap(),
            11.0,
            epsilon = 1e-12
        );
        assert!(interval_score(1.0, 0.0, 0.5, 0.05).is_err());
    }

    #[test]
    fn interval_score_prefers_covering_intervals() {
        // same width, one covers x and one misses: the covering one scores
        // strictly lower
        let covering = interval_score(0.0, 2.0, 1.0, 0.05).unwrap();
        let missing = interval_score(3.0, 5.0, 1.0, 0.05).unwrap();
        assert!(covering < missing);
    }

    #[test]
    fn coverage_examples() {
        let l = [0.0, 0.0, 0.0, 0.0];
        let u = [1.0, 1.0, 1.0, 1.0];
        assert_abs_diff_eq!(
            coverage(&l, &u, &[0.5, 0.2, 0.9, 0.1]).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            coverage(&l, &u, &[2.0, -1.0, 3.0, 9.0]).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            coverage(&l, &u, &[0.5, 0.5, 2.0, -2.0]).unwrap(),
            0.5,
            epsilon = 1e-15
        );
    }
}
