#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fastfwd::adapters::{AdapterSpec, TargetSelector};
use fastfwd::data::{corpus_from_text, split, synthetic_text, Batch, Splits};
use fastfwd::experiments::{Protocol, Task};
use fastfwd::fastforward::{FastForwardConfig, ScheduleConfig};
use fastfwd::model::{
    make_char_lm, make_classification_data, make_mlp, make_synthetic_lowrank, Architecture, CharLmConfig, Model,
    Param,
};
use fastfwd::optim::AdamConfig;
use fastfwd::Tensor;

/// `L(w) = (1/d)·Σ sᵢ²(wᵢ − tᵢ)²`: regression with `X = diag(s)`, `Y = s∘t`.
pub fn separable_quadratic(scales: &[f64], targets: &[f64], start: &[f64]) -> (Model, Batch) {
    let d = scales.len();
    let mut x = vec![0.0; d * d];
    for i in 0..d {
        x[i * d + i] = scales[i];
    }
    let y: Vec<f64> = scales.iter().zip(targets).map(|(s, t)| s * t).collect();
    let mut params = BTreeMap::new();
    params.insert(
        "w".to_string(),
        Param::trainable(Tensor::matrix(d, 1, start.to_vec()).unwrap()),
    );
    let model = Model::new(Architecture::Regression { d, k: 1 }, params).unwrap();
    let batch = Batch::new(Tensor::matrix(d, d, x).unwrap(), Tensor::matrix(d, 1, y).unwrap(), None).unwrap();
    (model, batch)
}

/// Direct evaluation of the separable quadratic, independent of the engine.
pub fn quadratic_value(scales: &[f64], targets: &[f64], w: &[f64]) -> f64 {
    let d = scales.len() as f64;
    scales
        .iter()
        .zip(targets)
        .zip(w)
        .map(|((s, t), w)| s * s * (w - t) * (w - t))
        .sum::<f64>()
        / d
}

pub fn tiny_lm_config(vocab_size: usize) -> CharLmConfig {
    CharLmConfig {
        vocab_size,
        embed_dim: 8,
        layer_count: 1,
        head_count: 2,
        context_length: 6,
    }
}

/// Random token batch for a char-LM.
pub fn token_batch(vocab: usize, rows: usize, t: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<f64> = (0..rows * (t + 1)).map(|_| rng.random_range(0..vocab) as f64).collect();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for r in 0..rows {
        let w = &ids[r * (t + 1)..(r + 1) * (t + 1)];
        inputs.extend_from_slice(&w[..t]);
        targets.extend_from_slice(&w[1..]);
    }
    Batch::new(
        Tensor::matrix(rows, t, inputs).unwrap(),
        Tensor::matrix(rows, t, targets).unwrap(),
        None,
    )
    .unwrap()
}

/// Adds N(0, std) noise to every parameter, trainable or not, so gradient
/// checks do not sit at special points (zero B, unit gains).
pub fn jitter(model: &mut Model, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.params().keys().cloned().collect();
    for n in names {
        let p = model.param_mut(&n).unwrap();
        for v in p.value.data_mut() {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            *v += std * z;
        }
    }
}

/// Worst ratio `|a − n| / (1e-4·(|a| + |n|) + 1e-8)` between the analytic
/// gradient and central differences (h = 1e-5) over up to `per_param`
/// entries of every trainable parameter. A value ≤ 1 passes.
pub fn gradient_discrepancy(model: &mut Model, batch: &Batch, per_param: usize, seed: u64) -> f64 {
    let h = 1e-5;
    model.loss_and_grad(batch).unwrap();
    let grads: BTreeMap<String, Tensor> = model
        .params()
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(n, p)| (n.clone(), p.grad.clone().unwrap()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (name, g) in &grads {
        let n = g.numel();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let orig = model.param(name).unwrap().value.data()[i];
            model.param_mut(name).unwrap().value.data_mut()[i] = orig + h;
            let up = model.loss(batch).unwrap();
            model.param_mut(name).unwrap().value.data_mut()[i] = orig - h;
            let down = model.loss(batch).unwrap();
            model.param_mut(name).unwrap().value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.data()[i];
            let err = (analytic - numeric).abs() / (1e-4 * (analytic.abs() + numeric.abs()) + 1e-8);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn regression_model(seed: u64) -> (Model, Batch) {
    let t = make_synthetic_lowrank(6, 5, 2, 0.1, 64, seed).unwrap();
    let rows: Vec<usize> = (0..16).collect();
    (t.model, t.data.select(&rows))
}

pub fn mlp_model(seed: u64) -> (Model, Batch) {
    let data = make_classification_data(5, 3, 64, seed).unwrap();
    let rows: Vec<usize> = (0..12).collect();
    (make_mlp(5, 7, 3, seed).unwrap(), data.select(&rows))
}

pub fn char_lm_model(seed: u64) -> (Model, Batch) {
    let cfg = tiny_lm_config(7);
    (make_char_lm(&cfg, seed).unwrap(), token_batch(7, 3, 6, seed))
}

/// Synthetic low-rank task at the comparison scale: d = k = 32, true rank
/// 4, LoRA rank 8 on the single weight.
pub fn synthetic_task(seed: u64) -> (Task, Protocol) {
    let t = make_synthetic_lowrank(32, 32, 4, 0.1, 1312, seed).unwrap();
    let data = split(&t.data, 256, 32, seed).unwrap();
    let task = Task {
        base: t.model,
        data,
        adapter: Some(AdapterSpec::lora(8, TargetSelector::Explicit(vec!["w".into()]))),
        seed,
    };
    (task, protocol(0.01, 32))
}

pub fn protocol(lr: f64, batch: usize) -> Protocol {
    Protocol {
        adam: AdamConfig::with_lr(lr),
        schedule: ScheduleConfig::new(batch, FastForwardConfig::default()),
        baseline_epochs: 5,
        eps: 1e-4,
    }
}

/// Adapter-free quadratic task: a small regression trained directly.
pub fn quadratic_task(seed: u64) -> (Task, Protocol) {
    let t = make_synthetic_lowrank(8, 4, 2, 0.05, 512, seed).unwrap();
    let data = split(&t.data, 64, 32, seed).unwrap();
    let task = Task {
        base: t.model,
        data,
        adapter: None,
        seed,
    };
    (task, protocol(0.01, 16))
}

/// Small char-LM task on generated text with LoRA on the attention matrices.
pub fn char_lm_task(seed: u64) -> (Task, Protocol) {
    let text = synthetic_text(seed, 3000);
    let corpus = corpus_from_text(&text, 12, 16, 8, seed).unwrap();
    let cfg = CharLmConfig {
        vocab_size: corpus.vocab.size(),
        embed_dim: 16,
        layer_count: 1,
        head_count: 2,
        context_length: 12,
    };
    let task = Task {
        base: make_char_lm(&cfg, seed).unwrap(),
        data: corpus.splits,
        adapter: Some(AdapterSpec::lora(2, TargetSelector::Attention)),
        seed,
    };
    let mut p = protocol(0.01, 16);
    p.baseline_epochs = 2;
    (task, p)
}

pub fn splits_of(task: &Task) -> &Splits {
    &task.data
}
