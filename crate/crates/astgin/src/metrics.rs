//! The five evaluation metrics, pooled over every station and time instant.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("shape mismatch: {truth} truth values vs {predicted} predictions")]
    ShapeMismatch { truth: usize, predicted: usize },
    #[error("undefined R2: ground truth is constant")]
    ConstantTruth,
    #[error("undefined accuracy: ground truth is all zeros")]
    ZeroTruthNorm,
}

/// Full metric set over one prediction batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub r2: f64,
    #[serde(rename = "var")]
    pub var_score: f64,
    pub mae: f64,
    pub accuracy: f64,
    pub n_points: usize,
}

fn check(y: &[f64], y_hat: &[f64]) -> Result<(), MetricsError> {
    if y.is_empty() {
        return Err(MetricsError::Empty);
    }
    if y.len() != y_hat.len() {
        return Err(MetricsError::ShapeMismatch { truth: y.len(), predicted: y_hat.len() });
    }
    Ok(())
}

/// Root mean squared error.
pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricsError> {
    check(y, y_hat)?;
    let n = y.len() as f64;
    let sq: f64 = y.iter().zip(y_hat).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok((sq / n).sqrt())
}

/// Coefficient of determination against the global truth mean.
pub fn r2(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricsError> {
    check(y, y_hat)?;
    let n = y.len() as f64;
    let mean: f64 = y.iter().sum::<f64>() / n;
    let ss_res: f64 = y.iter().zip(y_hat).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let ss_tot: f64 = y.iter().map(|&a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return Err(MetricsError::ConstantTruth);
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Explained variance score `1 - Var(y - y_hat) / Var(y)` with population
/// variances.
pub fn var_score(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricsError> {
    check(y, y_hat)?;
    let variance = |v: &[f64]| {
        let n = v.len() as f64;
        let mean: f64 = v.iter().sum::<f64>() / n;
        v.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n
    };
    let var_y = variance(y);
    if var_y == 0.0 {
        return Err(MetricsError::ConstantTruth);
    }
    let residuals: Vec<f64> = y.iter().zip(y_hat).map(|(&a, &b)| a - b).collect();
    Ok(1.0 - variance(&residuals) / var_y)
}

/// Mean absolute error.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricsError> {
    check(y, y_hat)?;
    let n = y.len() as f64;
    Ok(y.iter().zip(y_hat).map(|(&a, &b)| (a - b).abs()).sum::<f64>() / n)
}

/// `1 - ||y - y_hat||_F / ||y||_F`.
pub fn accuracy(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricsError> {
    check(y, y_hat)?;
    let norm = |v: std::slice::Iter<f64>| v.map(|&x| x * x).sum::<f64>().sqrt();
    let err_norm: f64 =
        y.iter().zip(y_hat).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let y_norm = norm(y.iter());
    if y_norm == 0.0 {
        return Err(MetricsError::ZeroTruthNorm);
    }
    Ok(1.0 - err_norm / y_norm)
}

/// All five metrics in one pass.
pub fn report(y: &[f64], y_hat: &[f64]) -> Result<MetricsReport, MetricsError> {
    Ok(MetricsReport {
        rmse: rmse(y, y_hat)?,
        r2: r2(y, y_hat)?,
        var_score: var_score(y, y_hat)?,
        mae: mae(y, y_hat)?,
        accuracy: accuracy(y, y_hat)?,
        n_points: y.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let y = [0.2, 0.5, 0.9, 0.1];
        let r = report(&y, &y).unwrap();
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.r2, 1.0);
        assert_eq!(r.var_score, 1.0);
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.n_points, 4);
    }

    #[test]
    fn rmse_hand_oracles() {
        // constant residual 0.1
        let y = [0.5, 0.6, 0.7];
        let y_hat = [0.4, 0.5, 0.6];
        assert!((rmse(&y, &y_hat).unwrap() - 0.1).abs() < 1e-15);
        // Y=(0,1), Yhat=(1,1) -> sqrt(1/2)
        assert!((rmse(&[0.0, 1.0], &[1.0, 1.0]).unwrap() - (0.5f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn r2_hand_oracles() {
        // mean predictor -> 0
        let y = [0.0, 2.0];
        assert!((r2(&y, &[1.0, 1.0]).unwrap()).abs() < 1e-15);
        assert!(matches!(r2(&[3.0, 3.0], &[1.0, 2.0]), Err(MetricsError::ConstantTruth)));
    }

    #[test]
    fn var_score_hand_oracles() {
        // constant bias is invisible to variance
        let y = [0.1, 0.4, 0.8, 0.3];
        let y_hat: Vec<f64> = y.iter().map(|v| v + 0.25).collect();
        assert!((var_score(&y, &y_hat).unwrap() - 1.0).abs() < 1e-12);
        // Y=(0,2), Yhat=(0,0) -> 1 - Var(0,2)/Var(0,2) = 0
        assert!((var_score(&[0.0, 2.0], &[0.0, 0.0]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn mae_hand_oracles() {
        // residuals +-0.1
        assert!((mae(&[0.5, 0.5], &[0.4, 0.6]).unwrap() - 0.1).abs() < 1e-15);
        // Y=(0,1), Yhat=(0.5,0.5) -> 0.5
        assert_eq!(mae(&[0.0, 1.0], &[0.5, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_hand_oracles() {
        // Yhat = 0 -> 0
        assert_eq!(accuracy(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 0.0);
        // Y=(3,4), Yhat=(3,0) -> 1 - 4/5
        assert!((accuracy(&[3.0, 4.0], &[3.0, 0.0]).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(accuracy(&[0.0, 0.0], &[1.0, 1.0]), Err(MetricsError::ZeroTruthNorm)));
    }

    #[test]
    fn accuracy_is_scale_covariant() {
        let y = [0.3, 0.8, 0.2, 0.9];
        let y_hat = [0.4, 0.7, 0.3, 0.8];
        let base = accuracy(&y, &y_hat).unwrap();
        for c in [2.0, -3.5, 0.125] {
            let cy: Vec<f64> = y.iter().map(|v| v * c).collect();
            let cy_hat: Vec<f64> = y_hat.iter().map(|v| v * c).collect();
            assert!((accuracy(&cy, &cy_hat).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_and_mismatched_inputs_rejected() {
        assert_eq!(rmse(&[], &[]), Err(MetricsError::Empty));
        assert!(matches!(
            mae(&[1.0], &[1.0, 2.0]),
            Err(MetricsError::ShapeMismatch { truth: 1, predicted: 2 })
        ));
    }

    #[test]
    fn mae_never_exceeds_rmse() {
        let mut state = 0x12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64) / (u32::MAX as f64)
        };
        for trial in 0..200 {
            let n = 2 + (trial % 17);
            let y: Vec<f64> = (0..n).map(|_| next()).collect();
            let y_hat: Vec<f64> = (0..n).map(|_| next()).collect();
            let m = mae(&y, &y_hat).unwrap();
            let r = rmse(&y, &y_hat).unwrap();
            assert!(m <= r + 1e-12, "mae {m} > rmse {r}");
        }
    }
}
