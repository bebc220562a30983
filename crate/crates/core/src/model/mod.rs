//! Differentiable training problems.
//!
//! A [`Model`] is a named parameter map plus an [`Architecture`] that turns
//! (weights, batch) into a scalar loss on a [`Tape`]. Parameters are stored
//! in a `BTreeMap`, so every iteration over them (flattening, optimizer
//! state, checkpoints) is in sorted-name order.

mod char_lm;
mod mlp;
mod regression;

use std::collections::BTreeMap;

pub use char_lm::{make_char_lm, CharLmConfig};
pub use mlp::{make_classification_data, make_mlp};
pub use regression::{make_synthetic_lowrank, LowRankTask};

use crate::adapters::{AdapterSite, Variant};
use crate::autodiff::{Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn trainable(value: Tensor) -> Self {
        Param {
            value,
            frozen: false,
            grad: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    /// `Y ≈ X·W`, mean squared error.
    Regression { d: usize, k: usize },
    /// `tanh(X·W1 + b1)·W2 + b2`, softmax cross-entropy.
    Mlp {
        in_dim: usize,
        hidden: usize,
        classes: usize,
    },
    CharLm(CharLmConfig),
}

/// Effective weights visible to an architecture's forward pass.
pub struct Weights(BTreeMap<String, Var>);

impl Weights {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }
}

impl Architecture {
    fn loss(&self, tape: &Tape, w: &Weights, batch: &Batch) -> Result<Var> {
        match self {
            Architecture::Regression { .. } => regression::loss(tape, w, batch),
            Architecture::Mlp { .. } => mlp::loss(tape, w, batch),
            Architecture::CharLm(cfg) => char_lm::loss(cfg, tape, w, batch),
        }
    }

    /// Forward FLOPs of the architecture alone (no adapter composition).
    pub fn forward_flops(&self, batch: &Batch) -> u64 {
        match self {
            Architecture::Regression { d, k } => regression::forward_flops(*d, *k, batch),
            Architecture::Mlp {
                in_dim,
                hidden,
                classes,
            } => mlp::forward_flops(*in_dim, *hidden, *classes, batch),
            Architecture::CharLm(cfg) => char_lm::forward_flops(cfg, batch),
        }
    }

    /// Names of the attention projection matrices (empty for non-transformers).
    pub fn attention_matrices(&self) -> Vec<String> {
        match self {
            Architecture::CharLm(cfg) => cfg.attention_matrices(),
            _ => Vec::new(),
        }
    }
}

/// Cost of one forward(+backward) evaluation as counted by the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassCost {
    pub loss: f64,
    pub forward_flops: u64,
    /// Tape-reported backward cost; zero for forward-only passes.
    pub backward_flops_exact: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: BTreeMap<String, Param>,
    adapters: BTreeMap<String, AdapterSite>,
}

impl Model {
    pub fn new(arch: Architecture, params: BTreeMap<String, Param>) -> Result<Self> {
        if params.values().all(|p| p.frozen) {
            return Err(Error::contract("model has no trainable parameter"));
        }
        Ok(Model {
            arch,
            params,
            adapters: BTreeMap::new(),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &BTreeMap<String, Param> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Param> {
        &mut self.params
    }

    pub fn adapters(&self) -> &BTreeMap<String, AdapterSite> {
        &self.adapters
    }

    pub(crate) fn adapters_mut(&mut self) -> &mut BTreeMap<String, AdapterSite> {
        &mut self.adapters
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.values().filter(|p| !p.frozen).map(|p| p.value.numel()).sum()
    }

    /// Freezes every parameter for which `keep` returns false and unfreezes
    /// the rest. Errors if nothing would remain trainable.
    pub fn set_trainable(&mut self, keep: impl Fn(&str) -> bool) -> Result<()> {
        if !self.params.keys().any(|n| keep(n)) {
            return Err(Error::config("trainable", "selection matches no parameter"));
        }
        for (name, p) in self.params.iter_mut() {
            p.frozen = !keep(name);
            p.grad = None;
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns the loss together with
    /// the leaf handle of every parameter.
    pub fn forward(&self, tape: &Tape, batch: &Batch) -> Result<(Var, BTreeMap<String, Var>)> {
        let mut leaves = BTreeMap::new();
        for (name, p) in &self.params {
            leaves.insert(name.clone(), tape.leaf(p.value.clone(), !p.frozen));
        }
        let mut effective = leaves.clone();
        for (site, adapter) in &self.adapters {
            let composed = adapter.compose(tape, site, &leaves)?;
            effective.insert(site.clone(), composed);
        }
        let loss = self.arch.loss(tape, &Weights(effective), batch)?;
        Ok((loss, leaves))
    }

    pub fn evaluate(&self, batch: &Batch) -> Result<PassCost> {
        let tape = Tape::new();
        let (loss, _) = self.forward(&tape, batch)?;
        Ok(PassCost {
            loss: tape.scalar(loss)?,
            forward_flops: tape.flops(),
            backward_flops_exact: 0,
        })
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        Ok(self.evaluate(batch)?.loss)
    }

    /// Forward + backward; stores gradients on trainable parameters and
    /// clears them on frozen ones.
    pub fn loss_and_grad(&mut self, batch: &Batch) -> Result<PassCost> {
        let tape = Tape::new();
        let (loss_var, leaves) = self.forward(&tape, batch)?;
        let loss = tape.scalar(loss_var)?;
        let forward_flops = tape.flops();
        let mut grads = tape.backward(loss_var)?;
        let backward_flops_exact = grads.backward_flops();
        for (name, p) in self.params.iter_mut() {
            p.grad = if p.frozen { None } else { grads.take(leaves[name]) };
        }
        Ok(PassCost {
            loss,
            forward_flops,
            backward_flops_exact,
        })
    }

    /// Analytic forward FLOPs for one pass over `batch`, including adapter
    /// composition. Equal to the tape's count for the same batch shape.
    pub fn forward_flops(&self, batch: &Batch) -> u64 {
        let compose: u64 = self
            .adapters
            .iter()
            .map(|(site, a)| {
                let (d, k) = self.params[site].value.dims2().unwrap_or((0, 0));
                a.compose_flops(d, k)
            })
            .sum();
        self.arch.forward_flops(batch) + compose
    }

    /// Flattened trainable values: sorted parameter name, then row-major.
    pub fn snapshot_trainable(&self) -> Tensor {
        let data: Vec<f64> = self
            .params
            .values()
            .filter(|p| !p.frozen)
            .flat_map(|p| p.value.data().iter().copied())
            .collect();
        // construction and `set_trainable` keep the trainable set non-empty
        Tensor::vector(data)
    }

    /// Inverse of [`Model::snapshot_trainable`].
    pub fn restore_trainable(&mut self, flat: &Tensor) -> Result<()> {
        let expected = self.trainable_count();
        if flat.numel() != expected {
            return Err(Error::contract(format!(
                "snapshot has {} values but the trainable set holds {expected}",
                flat.numel()
            )));
        }
        let mut offset = 0;
        for p in self.params.values_mut().filter(|p| !p.frozen) {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Flattened gradients of the trainable set, same layout as the snapshot.
    pub fn grad_snapshot(&self) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.trainable_count());
        for (name, p) in self.params.iter().filter(|(_, p)| !p.frozen) {
            let g = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?;
            data.extend_from_slice(g.data());
        }
        Tensor::new(vec![data.len()], data)
    }

    /// Composed weight of an adapter site, or the raw parameter otherwise.
    pub fn effective_weight(&self, name: &str) -> Result<Tensor> {
        let Some(adapter) = self.adapters.get(name) else {
            return Ok(self.param(name)?.value.clone());
        };
        let tape = Tape::new();
        let mut leaves = BTreeMap::new();
        for (pname, p) in &self.params {
            if pname == name || pname.starts_with(&format!("{name}.")) {
                leaves.insert(pname.clone(), tape.constant(p.value.clone()));
            }
        }
        let v = adapter.compose(&tape, name, &leaves)?;
        Ok(tape.value(v))
    }

    pub fn has_variant(&self, variant: Variant) -> bool {
        self.adapters.values().any(|a| a.variant == variant)
    }
}

pub(crate) fn class_targets(t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(Error::contract(format!("invalid class index {x}")))
            }
        })
        .collect()
}

pub(crate) fn gaussian(rng: &mut impl rand::Rng, shape: &[usize], std: f64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}
