use serde::Serialize;

use crate::data::Batch;
use crate::error::Result;
use crate::linalg::{condition_number, cosine};
use crate::model::Model;

/// Singular values at or below this are treated as zero.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageDiagnostics {
    pub grad_norm: f64,
    /// Mean over trainable matrices with a defined condition number.
    pub cond_mean: Option<f64>,
    pub cond_per_matrix: Vec<(String, Option<f64>)>,
    pub batch_consistency: Option<f64>,
}

/// Gradient statistics at a stage entry: norm and condition numbers from the
/// gradients currently stored on the model, consistency from fresh
/// per-batch gradients over `probe_batches` (skipped when fewer than two).
pub fn stage_diagnostics(model: &Model, probe_batches: &[Batch]) -> Result<StageDiagnostics> {
    let g = model.grad_snapshot()?;
    let grad_norm = g.norm();

    let mut cond_per_matrix = Vec::new();
    for (name, p) in model.params().iter().filter(|(_, p)| !p.frozen) {
        if let (Some(grad), 2) = (p.grad.as_ref(), p.value.ndim()) {
            cond_per_matrix.push((name.clone(), condition_number(grad, SIGMA_FLOOR)?));
        }
    }
    let defined: Vec<f64> = cond_per_matrix.iter().filter_map(|(_, c)| *c).collect();
    let cond_mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);

    let batch_consistency = if probe_batches.len() >= 2 {
        let mut scratch = model.clone();
        let mut grads = Vec::with_capacity(probe_batches.len());
        for b in probe_batches {
            scratch.loss_and_grad(b)?;
            grads.push(scratch.grad_snapshot()?);
        }
        mean_pairwise_cosine(grads.iter().map(|t| t.data()))
    } else {
        None
    };

    Ok(StageDiagnostics {
        grad_norm,
        cond_mean,
        cond_per_matrix,
        batch_consistency,
    })
}

/// Mean cosine over all unordered pairs with a defined cosine.
pub fn mean_pairwise_cosine<'a>(vectors: impl Iterator<Item = &'a [f64]>) -> Option<f64> {
    let v: Vec<&[f64]> = vectors.collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..v.len() {
        for j in 0..i {
            if let Some(c) = cosine(v[i], v[j]) {
                sum += c;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}
