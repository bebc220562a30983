use std::collections::BTreeMap;

use rand::Rng;

use super::{class_targets, gaussian, Architecture, Model, Param, Weights};
use crate::autodiff::{flops, Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Two-layer tanh classifier with every parameter trainable.
pub fn make_mlp(in_dim: usize, hidden: usize, classes: usize, seed: u64) -> Result<Model> {
    if in_dim == 0 || hidden == 0 || classes < 2 {
        return Err(Error::contract("mlp needs positive widths and at least two classes"));
    }
    let mut rng = rng::stream(seed, Stream::Init);
    let mut params = BTreeMap::new();
    params.insert(
        "w1".to_string(),
        Param::trainable(gaussian(&mut rng, &[in_dim, hidden], 1.0 / (in_dim as f64).sqrt())),
    );
    params.insert("b1".to_string(), Param::trainable(Tensor::zeros(&[hidden])));
    params.insert(
        "w2".to_string(),
        Param::trainable(gaussian(&mut rng, &[hidden, classes], 1.0 / (hidden as f64).sqrt())),
    );
    params.insert("b2".to_string(), Param::trainable(Tensor::zeros(&[classes])));
    Model::new(
        Architecture::Mlp {
            in_dim,
            hidden,
            classes,
        },
        params,
    )
}

/// Gaussian inputs labelled by the arg-max of a random linear teacher.
pub fn make_classification_data(in_dim: usize, classes: usize, n: usize, seed: u64) -> Result<Batch> {
    let mut rng = rng::stream(seed, Stream::Data);
    let x = gaussian(&mut rng, &[n, in_dim], 1.0);
    let teacher = gaussian(&mut rng, &[in_dim, classes], 1.0);
    let scores = x.matmul(&teacher)?;
    let labels: Vec<f64> = (0..n)
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            // a little label noise keeps the problem from being separable
            if rng.random::<f64>() < 0.05 {
                rng.random_range(0..classes) as f64
            } else {
                best as f64
            }
        })
        .collect();
    Batch::new(x, Tensor::matrix(n, 1, labels)?, None)
}

pub(super) fn loss(tape: &Tape, w: &Weights, batch: &Batch) -> Result<Var> {
    let x = tape.constant(batch.inputs.clone());
    let h = tape.matmul(x, w.get("w1")?)?;
    let h = tape.add_row(h, w.get("b1")?)?;
    let h = tape.tanh(h)?;
    let logits = tape.matmul(h, w.get("w2")?)?;
    let logits = tape.add_row(logits, w.get("b2")?)?;
    let targets = class_targets(&batch.targets)?;
    tape.cross_entropy(logits, &targets, batch.mask.as_ref().map(|m| m.data()))
}

pub(super) fn forward_flops(in_dim: usize, hidden: usize, classes: usize, batch: &Batch) -> u64 {
    let n = batch.example_count();
    flops::matmul(n, in_dim, hidden)
        + 2 * flops::elementwise(n * hidden)
        + flops::matmul(n, hidden, classes)
        + flops::elementwise(n * classes)
        + flops::cross_entropy(n, classes)
}
