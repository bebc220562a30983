use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{class_targets, gaussian, Architecture, Model, Param, Weights};
use crate::autodiff::{flops, Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharLmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layer_count: usize,
    pub head_count: usize,
    pub context_length: usize,
}

impl CharLmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("layer_count", self.layer_count),
            ("head_count", self.head_count),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.head_count) {
            return Err(Error::config("head_count", "must divide embed_dim"));
        }
        if self.context_length < 2 {
            return Err(Error::config("context_length", "must be at least 2"));
        }
        Ok(())
    }

    fn ffn_dim(&self) -> usize {
        4 * self.embed_dim
    }

    /// The Q, K, V and O projections of every block.
    pub fn attention_matrices(&self) -> Vec<String> {
        (0..self.layer_count)
            .flat_map(|l| ["wq", "wk", "wv", "wo"].map(|m| format!("blocks.{l}.attn.{m}")))
            .collect()
    }
}

/// Decoder-only transformer: token + learned position embeddings, pre-norm
/// blocks of causal multi-head attention and a GELU feed-forward, a final
/// layer norm and an untied output projection.
pub fn make_char_lm(cfg: &CharLmConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let (v, d, f, t) = (cfg.vocab_size, cfg.embed_dim, cfg.ffn_dim(), cfg.context_length);
    let mut rng = rng::stream(seed, Stream::Init);
    let mut params = BTreeMap::new();
    let mut put = |name: String, value: Tensor| {
        params.insert(name, Param::trainable(value));
    };
    put("tok_emb".into(), gaussian(&mut rng, &[v, d], INIT_STD));
    put("pos_emb".into(), gaussian(&mut rng, &[t, d], INIT_STD));
    for l in 0..cfg.layer_count {
        let p = format!("blocks.{l}");
        put(format!("{p}.ln1.gain"), Tensor::ones(&[d]));
        put(format!("{p}.ln1.bias"), Tensor::zeros(&[d]));
        for m in ["wq", "wk", "wv", "wo"] {
            put(format!("{p}.attn.{m}"), gaussian(&mut rng, &[d, d], INIT_STD));
        }
        put(format!("{p}.ln2.gain"), Tensor::ones(&[d]));
        put(format!("{p}.ln2.bias"), Tensor::zeros(&[d]));
        put(format!("{p}.mlp.w1"), gaussian(&mut rng, &[d, f], INIT_STD));
        put(format!("{p}.mlp.b1"), Tensor::zeros(&[f]));
        put(format!("{p}.mlp.w2"), gaussian(&mut rng, &[f, d], INIT_STD));
        put(format!("{p}.mlp.b2"), Tensor::zeros(&[d]));
    }
    put("ln_f.gain".into(), Tensor::ones(&[d]));
    put("ln_f.bias".into(), Tensor::zeros(&[d]));
    put("head".into(), gaussian(&mut rng, &[d, v], INIT_STD));
    Model::new(Architecture::CharLm(cfg.clone()), params)
}

fn batch_dims(cfg: &CharLmConfig, batch: &Batch) -> Result<(usize, usize)> {
    let (b, t) = batch.inputs.dims2()?;
    if t > cfg.context_length {
        return Err(Error::contract(format!(
            "sequence length {t} exceeds context length {}",
            cfg.context_length
        )));
    }
    Ok((b, t))
}

pub(super) fn loss(cfg: &CharLmConfig, tape: &Tape, w: &Weights, batch: &Batch) -> Result<Var> {
    let (b, t) = batch_dims(cfg, batch)?;
    let ids = class_targets(&batch.inputs)?;
    let positions: Vec<usize> = (0..t).collect();

    let tok = tape.gather(w.get("tok_emb")?, &ids)?;
    let pos = tape.gather(w.get("pos_emb")?, &positions)?;
    let mut x = tape.add_tiled(tok, pos)?;

    for l in 0..cfg.layer_count {
        let p = format!("blocks.{l}");
        let h = tape.layer_norm(x, w.get(&format!("{p}.ln1.gain"))?, w.get(&format!("{p}.ln1.bias"))?)?;
        let q = tape.matmul(h, w.get(&format!("{p}.attn.wq"))?)?;
        let k = tape.matmul(h, w.get(&format!("{p}.attn.wk"))?)?;
        let v = tape.matmul(h, w.get(&format!("{p}.attn.wv"))?)?;
        let a = tape.causal_attention(q, k, v, b, t, cfg.head_count)?;
        let a = tape.matmul(a, w.get(&format!("{p}.attn.wo"))?)?;
        x = tape.add(x, a)?;

        let h = tape.layer_norm(x, w.get(&format!("{p}.ln2.gain"))?, w.get(&format!("{p}.ln2.bias"))?)?;
        let h = tape.matmul(h, w.get(&format!("{p}.mlp.w1"))?)?;
        let h = tape.add_row(h, w.get(&format!("{p}.mlp.b1"))?)?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, w.get(&format!("{p}.mlp.w2"))?)?;
        let h = tape.add_row(h, w.get(&format!("{p}.mlp.b2"))?)?;
        x = tape.add(x, h)?;
    }
    let h = tape.layer_norm(x, w.get("ln_f.gain")?, w.get("ln_f.bias")?)?;
    let logits = tape.matmul(h, w.get("head")?)?;
    let targets = class_targets(&batch.targets)?;
    tape.cross_entropy(logits, &targets, batch.mask.as_ref().map(|m| m.data()))
}

pub(super) fn forward_flops(cfg: &CharLmConfig, batch: &Batch) -> u64 {
    let b = batch.inputs.shape()[0];
    let t = batch.inputs.shape().get(1).copied().unwrap_or(1);
    let n = b * t;
    let (d, f, v, h) = (cfg.embed_dim, cfg.ffn_dim(), cfg.vocab_size, cfg.head_count);
    let block = flops::layer_norm(n, d)
        + 4 * flops::matmul(n, d, d)
        + flops::causal_attention(b, t, h, d / h)
        + flops::elementwise(n * d) // attention residual
        + flops::layer_norm(n, d)
        + flops::matmul(n, d, f)
        + 2 * flops::elementwise(n * f) // bias, gelu
        + flops::matmul(n, f, d)
        + 2 * flops::elementwise(n * d); // bias, residual
    flops::elementwise(n * d) // position add
        + cfg.layer_count as u64 * block
        + flops::layer_norm(n, d)
        + flops::matmul(n, d, v)
        + flops::cross_entropy(n, v)
}
