//! Generalized convolutional prototype learning: distance-based
//! cross-entropy against learnable class prototypes plus a center loss.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{log_sum_exp, softmax_unchecked, sq_dist, Matrix};

/// One learnable prototype per class, stored as the rows of a `C × ED` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    prototypes: Matrix,
}

impl PrototypeBank {
    pub fn new(prototypes: Matrix) -> Result<Self> {
        if prototypes.rows() == 0 || prototypes.cols() == 0 {
            return Err(invalid("prototype bank needs at least one class and one dimension"));
        }
        if !prototypes.is_finite() {
            return Err(invalid("prototype bank contains non-finite values"));
        }
        Ok(PrototypeBank { prototypes })
    }

    /// Per-class means of `embeddings`. Classes without examples get the
    /// overall mean so that no prototype is left undefined.
    pub fn from_class_means(embeddings: &Matrix, labels: &[usize], classes: usize) -> Result<Self> {
        if embeddings.rows() != labels.len() || labels.is_empty() {
            return Err(invalid("embeddings and labels differ in length (or are empty)"));
        }
        let d = embeddings.cols();
        let mut sums = Matrix::zeros(classes, d);
        let mut counts = vec![0usize; classes];
        let mut overall = vec![0.0; d];
        for (row, &y) in embeddings.iter_rows().zip(labels) {
            if y >= classes {
                return Err(invalid(format!("label {y} out of range for {classes} classes")));
            }
            counts[y] += 1;
            for (k, v) in row.iter().enumerate() {
                sums.row_mut(y)[k] += v;
                overall[k] += v;
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            let row = sums.row_mut(c);
            if count == 0 {
                for (dst, v) in row.iter_mut().zip(&overall) {
                    *dst = v / labels.len() as f64;
                }
            } else {
                for v in row.iter_mut() {
                    *v /= count as f64;
                }
            }
        }
        PrototypeBank::new(sums)
    }

    pub fn classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        self.prototypes.row(class)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.prototypes
    }

    /// Squared distances from `embedding` to every prototype.
    pub fn distances(&self, embedding: &[f64]) -> Vec<f64> {
        self.prototypes.iter_rows().map(|m| sq_dist(embedding, m)).collect()
    }
}

/// Loss and gradients returned by the prototype objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeLoss {
    pub loss: f64,
    pub grad_embeddings: Matrix,
    pub grad_prototypes: Matrix,
}

/// Distance-based cross-entropy for a single example.
///
/// Returns `(loss, ∂/∂embedding, ∂/∂prototypes)`.
pub fn dce_loss(embedding: &[f64], bank: &PrototypeBank, label: usize, tau: f64) -> Result<(f64, Vec<f64>, Matrix)> {
    if label >= bank.classes() {
        return Err(invalid(format!("label {label} out of range for {} prototypes", bank.classes())));
    }
    if embedding.len() != bank.dim() {
        return Err(invalid("embedding and prototype dimensions differ"));
    }
    if !(tau > 0.0) {
        return Err(invalid("tau must be positive"));
    }
    let dists = bank.distances(embedding);
    let z: Vec<f64> = dists.iter().map(|d| -tau * d).collect();
    let loss = log_sum_exp(&z) - z[label];
    let p = softmax_unchecked(&z);

    let d = embedding.len();
    let mut g_e = vec![0.0; d];
    let mut g_m = Matrix::zeros(bank.classes(), d);
    for (k, pk) in p.iter().enumerate() {
        // ∂L/∂z_k = p_k − [k = y];  z_k = −τ‖e − m_k‖²
        let coeff = pk - if k == label { 1.0 } else { 0.0 };
        if coeff == 0.0 {
            continue;
        }
        let m = bank.prototype(k);
        for j in 0..d {
            let diff = embedding[j] - m[j];
            g_e[j] -= 2.0 * tau * coeff * diff;
            g_m.row_mut(k)[j] += 2.0 * tau * coeff * diff;
        }
    }
    Ok((loss, g_e, g_m))
}

/// `(1/N) Σ ‖eᵢ − m_{yᵢ}‖²` with gradients on embeddings and the assigned prototypes.
pub fn center_loss(embeddings: &Matrix, bank: &PrototypeBank, labels: &[usize]) -> Result<PrototypeLoss> {
    check_batch(embeddings, bank, labels)?;
    let n = labels.len() as f64;
    let mut g_e = Matrix::zeros(embeddings.rows(), embeddings.cols());
    let mut g_m = Matrix::zeros(bank.classes(), bank.dim());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let e = embeddings.row(i);
        let m = bank.prototype(y);
        total += sq_dist(e, m);
        for j in 0..e.len() {
            let g = 2.0 * (e[j] - m[j]) / n;
            g_e.row_mut(i)[j] += g;
            g_m.row_mut(y)[j] -= g;
        }
    }
    Ok(PrototypeLoss {
        loss: total / n,
        grad_embeddings: g_e,
        grad_prototypes: g_m,
    })
}

/// Batch-mean distance cross-entropy plus `λ ·` center loss.
pub fn prototype_total(
    embeddings: &Matrix,
    bank: &PrototypeBank,
    labels: &[usize],
    lambda: f64,
    tau: f64,
) -> Result<PrototypeLoss> {
    check_batch(embeddings, bank, labels)?;
    let n = labels.len() as f64;
    let mut out = center_loss(embeddings, bank, labels)?;
    out.loss *= lambda;
    for v in out.grad_embeddings.as_mut_slice() {
        *v *= lambda;
    }
    for v in out.grad_prototypes.as_mut_slice() {
        *v *= lambda;
    }
    for (i, &y) in labels.iter().enumerate() {
        let (l, g_e, g_m) = dce_loss(embeddings.row(i), bank, y, tau)?;
        out.loss += l / n;
        for (dst, v) in out.grad_embeddings.row_mut(i).iter_mut().zip(g_e) {
            *dst += v / n;
        }
        for (dst, v) in out.grad_prototypes.as_mut_slice().iter_mut().zip(g_m.as_slice()) {
            *dst += v / n;
        }
    }
    Ok(out)
}

fn check_batch(embeddings: &Matrix, bank: &PrototypeBank, labels: &[usize]) -> Result<()> {
    if embeddings.rows() != labels.len() || labels.is_empty() {
        return Err(invalid("embeddings and labels differ in length (or are empty)"));
    }
    if embeddings.cols() != bank.dim() {
        return Err(invalid("embedding and prototype dimensions differ"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= bank.classes()) {
        return Err(invalid(format!("label {y} out of range for {} prototypes", bank.classes())));
    }
    Ok(())
}
