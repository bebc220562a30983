use std::collections::BTreeMap;

use super::{gaussian, Architecture, Model, Param, Weights};
use crate::autodiff::{flops, Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Synthetic low-rank finetuning problem.
///
/// Targets are `X·(W₀ + U·V) + noise` where `W₀` is the base weight held by
/// the model and `U·V` is the rank-`true_rank` shift an adapter must learn.
#[derive(Debug, Clone)]
pub struct LowRankTask {
    pub model: Model,
    pub data: Batch,
    /// `d × true_rank`
    pub shift_left: Tensor,
    /// `true_rank × k`
    pub shift_right: Tensor,
}

pub fn make_synthetic_lowrank(
    d: usize,
    k: usize,
    true_rank: usize,
    noise_std: f64,
    n: usize,
    seed: u64,
) -> Result<LowRankTask> {
    if d == 0 || k == 0 || true_rank == 0 || true_rank > d.min(k) {
        return Err(Error::contract(format!(
            "true rank {true_rank} must lie in 1..={}",
            d.min(k)
        )));
    }
    if n < 64 {
        return Err(Error::contract(format!("need at least 64 examples, got {n}")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::contract("noise_std must be a non-negative finite number"));
    }
    let mut init = rng::stream(seed, Stream::Init);
    let w0 = gaussian(&mut init, &[d, k], 1.0 / (d as f64).sqrt());

    let mut gen = rng::stream(seed, Stream::Data);
    let x = gaussian(&mut gen, &[n, d], 1.0);
    let u = gaussian(&mut gen, &[d, true_rank], 1.0 / (d as f64).sqrt());
    let v = gaussian(&mut gen, &[true_rank, k], 0.5 / (true_rank as f64).sqrt());
    let w_true = w0.add(&u.matmul(&v)?)?;
    let mut y = x.matmul(&w_true)?;
    if noise_std > 0.0 {
        let noise = gaussian(&mut gen, &[n, k], noise_std);
        y = y.add(&noise)?;
    }

    let mut params = BTreeMap::new();
    params.insert("w".to_string(), Param::trainable(w0));
    let model = Model::new(Architecture::Regression { d, k }, params)?;
    Ok(LowRankTask {
        model,
        data: Batch::new(x, y, None)?,
        shift_left: u,
        shift_right: v,
    })
}

pub(super) fn loss(tape: &Tape, w: &Weights, batch: &Batch) -> Result<Var> {
    let x = tape.constant(batch.inputs.clone());
    let pred = tape.matmul(x, w.get("w")?)?;
    tape.mse(pred, &batch.targets)
}

pub(super) fn forward_flops(d: usize, k: usize, batch: &Batch) -> u64 {
    let n = batch.example_count();
    flops::matmul(n, d, k) + flops::mse(n * k)
}
