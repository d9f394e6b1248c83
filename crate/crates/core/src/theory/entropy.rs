// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::attn::{softmax, AttentionMatrix};
use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-9;

/// `(σ², H)` of a probability vector: `σ² = (1/T) Σ (p_j - 1/T)²`,
/// `H = -Σ p_j ln p_j` with `0 ln 0 = 0`.
pub fn distribution_variance_entropy(p: &[f64]) -> Result<(f64, f64)> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || (sum - 1.0).abs() > STOCHASTIC_TOL || p.iter().any(|v| *v < -STOCHASTIC_TOL || !v.is_finite()) {
        return Err(Error::NotStochastic { row: 0, sum });
    }
    let t = p.len() as f64;
    let var = p.iter().map(|v| (v - 1.0 / t).powi(2)).sum::<f64>() / t;
    let h = -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    Ok((var, h))
}

/// Variance and entropy of attention row `i`.
///
/// For a causal matrix the row is a distribution over its `i + 1` visible
/// keys, so `T = i + 1`; otherwise `T` is the full row width.
pub fn row_variance_entropy(a: &AttentionMatrix, i: usize) -> Result<(f64, f64)> {
    if i >= a.len() {
        return Err(Error::InvalidArgument(format!("row {i} outside a {}-token matrix", a.len())));
    }
    let row = a.weights().row(i);
    let width = if a.is_causal() { i + 1 } else { row.len() };
    let p: Vec<f64> = row.iter().take(width).copied().collect();
    distribution_variance_entropy(&p).map_err(|e| match e {
        Error::NotStochastic { sum, .. } => Error::NotStochastic { row: i, sum },
        e => e,
    })
}

/// `(t, σ², H)` of `softmax(t·z)` along a temperature path.
pub fn tempered_path(z: &[f64], temps: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    temps
        .iter()
        .map(|&t| {
            let scaled: Vec<f64> = z.iter().map(|v| v * t).collect();
            let (var, h) = distribution_variance_entropy(&softmax(&scaled))?;
            Ok((t, var, h))
        })
        .collect()
}
