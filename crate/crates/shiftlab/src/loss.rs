//! Probability transforms and losses. All losses are means over batch rows,
//! logs are natural, and probabilities are clamped at `PROB_CLAMP` before any
//! log so that confident-but-wrong predictions yield large finite losses.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Row-wise stable softmax: subtracts each row's max before exponentiating.
/// Errors on non-finite input.
pub fn stable_softmax(logits: &Matrix) -> Result<Matrix> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = out.row_mut(r);
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Ok(out)
}

/// Row-wise log-softmax, computed directly for accuracy in the tails.
pub fn log_softmax(logits: &Matrix) -> Result<Matrix> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("log_softmax input".into()));
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let dst = out.row_mut(r);
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    Ok(out)
}

/// Mean cross-entropy between integer labels and predicted probability rows.
pub fn cross_entropy_labels(labels: &[usize], probs: &Matrix) -> f64 {
    assert_eq!(labels.len(), probs.rows(), "label count != rows");
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        assert!(y < probs.cols(), "label {} out of range", y);
        total -= probs.get(r, y).max(PROB_CLAMP).ln();
    }
    total / labels.len() as f64
}

/// Mean cross-entropy between target distribution rows and predicted rows.
pub fn cross_entropy(targets: &Matrix, probs: &Matrix) -> f64 {
    assert_eq!(targets.shape(), probs.shape(), "cross_entropy shape mismatch");
    let mut total = 0.0;
    for r in 0..targets.rows() {
        for (t, q) in targets.row(r).iter().zip(probs.row(r)) {
            if *t != 0.0 {
                total -= t * q.max(PROB_CLAMP).ln();
            }
        }
    }
    total / targets.rows() as f64
}

/// Cross-entropy from the uniform distribution to one probability row:
/// -(1/K) sum_k log q_k. Minimized (value ln K) exactly at the uniform row.
pub fn uniform_divergence_row(q: &[f64]) -> f64 {
    let k = q.len() as f64;
    -q.iter().map(|v| v.max(PROB_CLAMP).ln()).sum::<f64>() / k
}

/// Mean of `uniform_divergence_row` over batch rows.
pub fn uniform_divergence_mean(probs: &Matrix) -> f64 {
    let mut total = 0.0;
    for row in probs.iter_rows() {
        total += uniform_divergence_row(row);
    }
    total / probs.rows() as f64
}

/// Mean of squared entrywise differences.
pub fn mse(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "mse shape mismatch");
    let n = (a.rows() * a.cols()) as f64;
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

pub fn mse_vec(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "mse_vec length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Binary cross-entropy against a scalar logit, in the overflow-safe form
/// max(z,0) - z*t + ln(1 + exp(-|z|)).
pub fn bce_with_logit(target: f64, logit: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Mean Shannon entropy (natural log) of probability rows.
pub fn entropy_mean(probs: &Matrix) -> f64 {
    let mut total = 0.0;
    for row in probs.iter_rows() {
        for &p in row {
            if p > 0.0 {
                total -= p * p.max(PROB_CLAMP).ln();
            }
        }
    }
    total / probs.rows() as f64
}
