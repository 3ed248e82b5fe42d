use super::Real;
use crate::error::{Error, Result};

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[label]` via log-sum-exp, and its gradient
/// `softmax(logits) - onehot(label)`.
pub fn sparse_softmax_cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum_exp: T = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_sum_exp = max + sum_exp.ln();
    let loss = log_sum_exp - logits[label];
    let mut grad: Vec<T> = logits.iter().map(|&z| (z - log_sum_exp).exp()).collect();
    grad[label] = grad[label] - T::one();
    Ok((loss, grad))
}
