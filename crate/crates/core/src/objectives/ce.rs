use crate::error::{invalid, Result};
use crate::numerics::{log_sum_exp, softmax_unchecked, Matrix};

/// `−log softmax(logits)[label]` and its gradient `p − onehot(label)`.
pub fn ce_loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(invalid(format!("label {label} out of range for {} logits", logits.len())));
    }
    crate::numerics::ensure_finite(logits, "logits")?;
    let loss = log_sum_exp(logits) - logits[label];
    let mut grad = softmax_unchecked(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Batch-mean cross-entropy over the rows of `logits`.
pub fn ce_batch(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(invalid("logit rows and labels differ in length (or are empty)"));
    }
    let n = labels.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let (l, g) = ce_loss(logits.row(i), y)?;
        total += l;
        for (dst, v) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = v / n;
        }
    }
    Ok((total / n, grad))
}
