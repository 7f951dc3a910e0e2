//! Binary cross-entropy.

use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

/// Mean binary cross-entropy over a batch.
pub fn bce_loss(y: &[u8], p: &[f64]) -> Result<f64> {
    if y.is_empty() || y.len() != p.len() {
        return Err(Error::Shape(format!(
            "bce over {} labels and {} probabilities",
            y.len(),
            p.len()
        )));
    }
    let sum: f64 = y
        .iter()
        .zip(p)
        .map(|(&y, &p)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / y.len() as f64)
}
