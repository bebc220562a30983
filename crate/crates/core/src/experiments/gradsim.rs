use std::collections::VecDeque;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::tensor::Tensor;

/// Bounded history of flattened gradients. Once `capacity` snapshots are
/// held, each push evicts the oldest one.
#[derive(Debug, Clone, PartialEq)]
pub struct GradHistory {
    capacity: usize,
    entries: VecDeque<(usize, Tensor)>,
}

impl GradHistory {
    pub fn new(capacity: usize) -> Self {
        GradHistory {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
        }
    }

    pub fn push(&mut self, step: usize, grad: Tensor) -> Result<()> {
        if let Some((last, g)) = self.entries.back() {
            if step <= *last {
                return Err(Error::contract(format!("gradient step {step} does not follow {last}")));
            }
            if g.numel() != grad.numel() {
                return Err(Error::contract("gradient snapshots differ in length"));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((step, grad));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.entries.iter().map(|(s, g)| (*s, g))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityEntry {
    pub t: usize,
    pub s: usize,
    /// `None` when either gradient is zero.
    pub cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    /// Lower triangle, row-major: for each `t`, every earlier `s`.
    pub entries: Vec<SimilarityEntry>,
    /// Per step `t`: mean cosine against all earlier snapshots.
    pub running_mean: Vec<(usize, Option<f64>)>,
}

pub fn grad_similarity_matrix(hist: &GradHistory) -> SimilarityMatrix {
    let items: Vec<(usize, &Tensor)> = hist.iter().collect();
    let mut entries = Vec::new();
    let mut running_mean = Vec::new();
    for (i, &(t, gt)) in items.iter().enumerate() {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &(s, gs) in &items[..i] {
            let c = cosine(gt.data(), gs.data());
            if let Some(c) = c {
                sum += c;
                n += 1;
            }
            entries.push(SimilarityEntry { t, s, cosine: c });
        }
        running_mean.push((t, (n > 0).then(|| sum / n as f64)));
    }
    SimilarityMatrix { entries, running_mean }
}
