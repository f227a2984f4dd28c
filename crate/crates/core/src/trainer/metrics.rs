use serde::Serialize;

use crate::error::{Error, Result};

/// Regression quality and timing of one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mse: f64,
    pub mae: f64,
    /// NaN when the targets are constant; see `r2_defined`.
    pub r2: f64,
    pub r2_defined: bool,
    pub total_s: f64,
    pub avg_s: f64,
    pub count: usize,
}

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(Error::dim(
            "metrics",
            format!("targets {} vs predictions {}", y.len(), y_hat.len()),
        ));
    }
    Ok(())
}

/// `(1/N) Σ (y − ŷ)²`.
pub fn mse_loss(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Gradient of [`mse_loss`] with respect to `y_hat`: `2 (ŷ − y) / N`.
pub fn mse_grad(y: &[f64], y_hat: &[f64]) -> Result<Vec<f64>> {
    check_pair(y, y_hat)?;
    let n = y.len() as f64;
    Ok(y.iter().zip(y_hat).map(|(a, b)| 2.0 * (b - a) / n).collect())
}

/// RMSE, MSE, MAE and R² of `y_hat` against `y`, with the given wall time.
pub fn metrics(y: &[f64], y_hat: &[f64], total_s: f64) -> Result<MetricsReport> {
    let mse = mse_loss(y, y_hat)?;
    let n = y.len() as f64;
    let mae = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let mean = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    let r2_defined = ss_tot > 0.0 && y.len() >= 2;
    Ok(MetricsReport {
        rmse: mse.sqrt(),
        mse,
        mae,
        r2: if r2_defined { 1.0 - ss_res / ss_tot } else { f64::NAN },
        r2_defined,
        total_s,
        avg_s: total_s / n,
        count: y.len(),
    })
}
