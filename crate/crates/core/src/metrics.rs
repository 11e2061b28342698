//! Outcome and effect errors, and their aggregation over repeated runs.

use crate::error::{Error, Result};

/// Root-mean-square difference of two aligned vectors.
pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Config(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Config("rmse of empty vectors".into()));
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((ss / a.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub sqrt_mse: f64,
    /// `None` when true effects are unavailable.
    pub sqrt_pehe: Option<f64>,
    pub split: String,
    pub seed: u64,
    pub variant: String,
}

/// `√ε_MSE` of factual predictions and, given true effects, `√ε_PEHE`.
pub fn compute_metrics(y_hat: &[f64], y: &[f64], tau_hat: &[f64], tau: Option<&[f64]>) -> Result<(f64, Option<f64>)> {
    let mse = rmse(y_hat, y)?;
    let pehe = tau.map(|t| rmse(tau_hat, t)).transpose()?;
    Ok((mse, pehe))
}

/// Mean and standard error of the mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// `None` for a single run.
    pub std_err: Option<f64>,
    pub runs: usize,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std_err = (values.len() >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    Some(Summary {
        mean,
        std_err,
        runs: values.len(),
    })
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.std_err {
            Some(se) => write!(f, "{:.4} ± {:.4}", self.mean, se),
            None => write!(f, "{:.4}", self.mean),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_zero() {
        let y = [1.0, -2.0, 3.5];
        assert_eq!(compute_metrics(&y, &y, &y, Some(&y)).unwrap(), (0.0, Some(0.0)));
    }

    #[test]
    fn constant_residual() {
        let tau = [0.5, 1.0, -3.0, 2.0];
        let shifted: Vec<f64> = tau.iter().map(|t| t + 2.0).collect();
        let (_, pehe) = compute_metrics(&[0.0; 4], &[0.0; 4], &shifted, Some(&tau)).unwrap();
        assert!((pehe.unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn random_vector_oracle() {
        let a = [0.3, -1.2, 2.2, 0.0, 4.1];
        let b = [1.0, -1.0, 2.0, -0.5, 3.0];
        // (0.49 + 0.04 + 0.04 + 0.25 + 1.21) / 5 = 0.406
        assert!((rmse(&a, &b).unwrap() - 0.406f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn missing_tau_is_not_zero() {
        let (_, pehe) = compute_metrics(&[1.0], &[2.0], &[0.0], None).unwrap();
        assert!(pehe.is_none());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn summary_standard_error() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        // sample variance 5/3, divided by 4
        assert!((s.std_err.unwrap() - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert!(summarize(&[7.0]).unwrap().std_err.is_none());
        assert!(summarize(&[]).is_none());
    }
}
