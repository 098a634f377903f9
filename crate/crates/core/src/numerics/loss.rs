//! Scalar losses and the Gaussian reparameterization.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-Σ target · log(probs)` for a one-hot target.
pub fn cross_entropy(probs: &[f64], target: &[f64]) -> Result<f64> {
    if probs.len() != target.len() {
        return Err(Error::dim("target", probs.len(), target.len()));
    }
    let ones = target.iter().filter(|&&t| t == 1.0).count();
    let zeros = target.iter().filter(|&&t| t == 0.0).count();
    if ones != 1 || ones + zeros != target.len() {
        return Err(Error::Label(format!("target is not one-hot: {target:?}")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Label(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(probs
        .iter()
        .zip(target)
        .map(|(&p, &t)| if t == 1.0 { -p.clamp(PROB_FLOOR, 1.0).ln() } else { 0.0 })
        .sum())
}

/// Mean cross-entropy of probability rows against class indices.
pub fn cross_entropy_batch(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::dim("labels", probs.rows(), labels.len()));
    }
    if probs.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (row, &y) in probs.row_iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::Label(format!("class index {y} out of range for {} classes", row.len())));
        }
        total -= row[y].clamp(PROB_FLOOR, 1.0).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Gradient of the mean softmax cross-entropy with respect to the logits:
/// `(p - onehot(y)) / n`.
pub fn softmax_xent_logit_grad(probs: &Matrix, labels: &[usize]) -> Matrix {
    let n = labels.len().max(1) as f64;
    let mut g = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        g[(r, y)] -= 1.0;
    }
    g.scale(1.0 / n);
    g
}

/// `KL(N(mu, exp(logvar)) ‖ N(0, I))`.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| lv.exp() + m * m - 1.0 - lv)
        .sum::<f64>()
}

/// Partial derivatives of [`gaussian_kl`]: `(∂/∂mu, ∂/∂logvar)` per coordinate.
#[inline]
pub fn gaussian_kl_grad(mu: f64, logvar: f64) -> (f64, f64) {
    (mu, 0.5 * (logvar.exp() - 1.0))
}

/// `mu + exp(logvar / 2) ⊙ noise`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], noise: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(logvar)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// Sum of squared coordinates of `a - b`.
pub fn squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
