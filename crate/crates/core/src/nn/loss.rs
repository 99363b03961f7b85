//! Softmax cross-entropy, numerically stabilized by max subtraction.

use crate::error::{LpssError, Result};
use crate::nn::tensor::Tensor;

/// Mean cross-entropy over the batch and the gradient with respect to the
/// logits, `(softmax - onehot) / n`. Logits are `(n, classes, 1, 1)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let n = logits.batch();
    let classes = logits.features();
    if labels.len() != n {
        return Err(LpssError::Data(format!(
            "batch has {n} samples but {} labels",
            labels.len()
        )));
    }
    let mut grad = Tensor::zeros(n, classes, 1, 1);
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let label = labels[i];
        if label >= classes {
            return Err(LpssError::Data(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = logits.sample(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in row {
            denom += (z - max).exp();
        }
        let log_denom = denom.ln();
        total += log_denom - (row[label] - max);
        let g = grad.sample_mut(i);
        for (k, &z) in row.iter().enumerate() {
            let p = (z - max).exp() / denom;
            g[k] = (p - if k == label { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

/// Index of the largest logit per sample, ties to the lowest index.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    (0..logits.batch())
        .map(|i| {
            let row = logits.sample(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
