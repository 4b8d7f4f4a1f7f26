//! Blahut–Arimoto channel capacity for finite channels.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CapacityResult {
    /// Capacity in nats.
    pub capacity: f64,
    /// Capacity-achieving input distribution.
    pub input: Vec<f64>,
    pub iterations: usize,
}

const MAX_ITERATIONS: usize = 200_000;

/// Capacity of the channel whose row `x` is the output distribution `p(y|x)`.
///
/// Iterates until the gap between the Blahut–Arimoto upper and lower capacity
/// bounds is below `tolerance`, which also bounds the change between sweeps.
pub fn discrete_mi_oracle(channel: &[Vec<f64>], tolerance: f64) -> Result<CapacityResult> {
    let nx = channel.len();
    if nx == 0 {
        return Err(Error::Validation("channel has no inputs".into()));
    }
    let ny = channel[0].len();
    for (i, row) in channel.iter().enumerate() {
        if row.len() != ny || ny == 0 {
            return Err(Error::Validation(format!("channel row {i} has {} entries, expected {ny}", row.len())));
        }
        if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Validation(format!("channel row {i} has invalid probability {v}")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("channel row {i} sums to {s}, not 1")));
        }
    }
    if !(tolerance > 0.0) {
        return Err(Error::Validation(format!("tolerance must be positive, got {tolerance}")));
    }

    let mut r = vec![1.0 / nx as f64; nx];
    let mut d = vec![0.0; nx];
    let mut q = vec![0.0; ny];
    for it in 1..=MAX_ITERATIONS {
        q.iter_mut().for_each(|v| *v = 0.0);
        for (rx, row) in r.iter().zip(channel) {
            for (qy, p) in q.iter_mut().zip(row) {
                *qy += rx * p;
            }
        }
        for (dx, row) in d.iter_mut().zip(channel) {
            *dx = row
                .iter()
                .zip(&q)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, qy)| p * (p / qy).ln())
                .sum();
        }
        let dmax = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = r.iter().zip(&d).map(|(rx, dx)| rx * (dx - dmax).exp()).sum();
        let lower = dmax + z.ln();
        if dmax - lower < tolerance {
            return Ok(CapacityResult {
                capacity: lower,
                input: r,
                iterations: it,
            });
        }
        for (rx, dx) in r.iter_mut().zip(&d) {
            *rx *= (dx - dmax).exp() / z;
        }
    }
    Err(Error::Numeric(format!(
        "Blahut–Arimoto did not reach tolerance {tolerance} in {MAX_ITERATIONS} iterations"
    )))
}

/// Channel `y = a + σ ε` with inputs restricted to `actions` and the output
/// quantized into bins with the given interior `edges` (the outer bins extend
/// to ±∞).
pub fn additive_channel_matrix(actions: &[f64], edges: &[f64], noise_std: f64) -> Result<Vec<Vec<f64>>> {
    if edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("bin edges must be strictly increasing".into()));
    }
    let normal = Normal::new(0.0, noise_std).map_err(|e| Error::Validation(format!("noise std: {e}")))?;
    Ok(actions
        .iter()
        .map(|&a| {
            let mut cdf = Vec::with_capacity(edges.len() + 2);
            cdf.push(0.0);
            cdf.extend(edges.iter().map(|e| normal.cdf(e - a)));
            cdf.push(1.0);
            cdf.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect()
        })
        .collect())
}
