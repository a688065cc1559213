//! Probability primitives shared across modules: diagonal Gaussian
//! log-densities and categorical KL divergence with a floored logarithm.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Floor applied inside logarithms of categorical probabilities so that
/// saturated one-hot rows stay finite.
pub const KL_LOG_FLOOR: f64 = 1e-8;

/// Log-density of a diagonal Gaussian:
/// Σᵢ [ −½((xᵢ−μᵢ)/σᵢ)² − ln σᵢ − ½ ln 2π ].
pub fn diag_gaussian_log_prob(x: &[f64], mean: &[f64], std: &[f64]) -> Result<f64> {
    if x.len() != mean.len() || x.len() != std.len() {
        return Err(Error::contract(format!(
            "length mismatch: x {}, mean {}, std {}",
            x.len(),
            mean.len(),
            std.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..x.len() {
        if !(std[i] > 0.0) {
            return Err(Error::domain(format!("std[{}] = {} is not positive", i, std[i])));
        }
        let z = (x[i] - mean[i]) / std[i];
        total += -0.5 * z * z - std[i].ln() - 0.5 * LN_2PI;
    }
    Ok(total)
}

fn check_rows(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.is_empty() {
        return Err(Error::contract(format!("{what} must have rank >= 1")));
    }
    let cols = *shape.last().unwrap();
    let rows = t.len() / cols;
    for r in 0..rows {
        let row = &t.data()[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for &v in row {
            if !(0.0..=1.0 + 1e-12).contains(&v) {
                return Err(Error::domain(format!(
                    "{what} row {r} has entry {v} outside [0,1]"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-8 {
            return Err(Error::domain(format!("{what} row {r} sums to {sum}, expected 1")));
        }
    }
    Ok((rows, cols))
}

/// KL(posterior ‖ prior) summed over rows of two probability matrices,
/// with `0·ln 0 := 0` and logarithms floored at [`KL_LOG_FLOOR`].
pub fn categorical_kl(posterior: &Tensor, prior: &Tensor) -> Result<f64> {
    if posterior.shape() != prior.shape() {
        return Err(Error::contract(format!(
            "shape mismatch: posterior {:?} vs prior {:?}",
            posterior.shape(),
            prior.shape()
        )));
    }
    let (rows, cols) = check_rows(posterior, "posterior")?;
    check_rows(prior, "prior")?;
    let mut total = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let p = posterior.data()[r * cols + c];
            let q = prior.data()[r * cols + c];
            if p > 0.0 {
                total += p * (p.max(KL_LOG_FLOOR).ln() - q.max(KL_LOG_FLOOR).ln());
            }
        }
    }
    Ok(total)
}

/// Numerically stable softmax of a slice.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}
