//! One-vs-all average-precision loss with an error-driven ranking update.
//!
//! For each class `c`, examples labelled `c` are positives `P` and the rest
//! negatives `N`, ranked by column `c` of the score matrix. With
//! `x_ik = s_k − s_i` and the piecewise-linear step
//!
//! ```text
//!        ⎧ 0                 x < −δ
//! H(x) = ⎨ x/(2δ) + 1/2      |x| ≤ δ
//!        ⎩ 1                 x > δ
//! ```
//!
//! each positive gets `rank(i) = 1 + Σ_{k≠i} H(x_ik)` and
//! `rank_pos(i) = 1 + Σ_{k∈P∖{i}} H(x_ik)`, precision `rank_pos/rank`, and the
//! class loss is `1 − mean_{i∈P} prec(i)`. The total is the sum over classes.
//!
//! The rank step is not usefully differentiable, so the update is assigned
//! directly: each positive/negative pair carries the primary term
//! `L_ij = H(x_ij)/rank(i)`, treated as `∂L/∂x_ij` after dividing by `|P|`, and
//! chained to the scores (`s_j` up the gradient, `s_i` down by the row sum).

use crate::error::{invalid, Result};
use crate::numerics::Matrix;

/// Smoothed Heaviside step of half-width `delta`.
#[inline]
pub fn smoothed_step(x: f64, delta: f64) -> f64 {
    if x < -delta {
        0.0
    } else if x > delta {
        1.0
    } else {
        x / (2.0 * delta) + 0.5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApLoss {
    /// Σ over contributing classes of `1 − AP_c`.
    pub loss: f64,
    /// Error-driven update on the score matrix.
    pub grad: Matrix,
    /// Per-class loss; `None` for classes lacking positives or negatives.
    pub per_class: Vec<Option<f64>>,
}

impl ApLoss {
    pub fn active_classes(&self) -> usize {
        self.per_class.iter().filter(|c| c.is_some()).count()
    }
}

/// Loss and update for an `N × C` score matrix.
///
/// Returns `Ok(None)` when no class has both a positive and a negative in the
/// batch; the caller skips such batches.
pub fn ap_loss(scores: &Matrix, labels: &[usize], delta: f64) -> Result<Option<ApLoss>> {
    if scores.rows() != labels.len() {
        return Err(invalid("score rows and labels differ in length"));
    }
    if !(delta > 0.0) {
        return Err(invalid("AP delta must be positive"));
    }
    let classes = scores.cols();
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(invalid(format!("label {y} out of range for {classes} score columns")));
    }
    let n = labels.len();
    let mut grad = Matrix::zeros(n, classes);
    let mut per_class = vec![None; classes];
    let mut total = 0.0;

    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    for c in 0..classes {
        positives.clear();
        negatives.clear();
        for (i, &y) in labels.iter().enumerate() {
            if y == c {
                positives.push(i);
            } else {
                negatives.push(i);
            }
        }
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        let s = |i: usize| scores.get(i, c);
        let inv_p = 1.0 / positives.len() as f64;
        let mut prec_sum = 0.0;
        for &i in &positives {
            let si = s(i);
            let rank_pos = 1.0
                + positives
                    .iter()
                    .filter(|&&k| k != i)
                    .map(|&k| smoothed_step(s(k) - si, delta))
                    .sum::<f64>();
            let h_neg: Vec<f64> = negatives.iter().map(|&j| smoothed_step(s(j) - si, delta)).collect();
            let rank = rank_pos + h_neg.iter().sum::<f64>();
            prec_sum += rank_pos / rank;

            let mut row_sum = 0.0;
            for (&j, &h) in negatives.iter().zip(&h_neg) {
                if h == 0.0 {
                    continue;
                }
                let primary = h / rank * inv_p;
                grad.set(j, c, grad.get(j, c) + primary);
                row_sum += primary;
            }
            grad.set(i, c, grad.get(i, c) - row_sum);
        }
        let class_loss = 1.0 - prec_sum * inv_p;
        per_class[c] = Some(class_loss);
        total += class_loss;
    }

    if per_class.iter().all(Option::is_none) {
        return Ok(None);
    }
    Ok(Some(ApLoss {
        loss: total,
        grad,
        per_class,
    }))
}

/// Exact `1 − AP` with a hard step, by sorting.
///
/// Scores are ranked descending; equal scores keep index order. Returns
/// `None` when there are no positives.
pub fn ap_brute_force(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            ap += hits as f64 / (pos + 1) as f64;
        }
    }
    Some(1.0 - ap / n_pos as f64)
}
