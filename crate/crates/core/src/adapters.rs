//! LoRA and DoRA reparameterizations over frozen base weights.
//!
//! For a selected base matrix `W₀ (d×k)` an adapter adds `B (d×r)` and
//! `A (r×k)` and the forward pass sees
//!
//! * LoRA: `W = W₀ + (α/r)·B·A`
//! * DoRA: `W[:, j] = m_j · V[:, j] / ‖V[:, j]‖₂` with `V = W₀ + (α/r)·B·A`
//!
//! `B` starts at zero and DoRA's magnitude `m` starts at the column norms of
//! `W₀`, so attaching an adapter leaves the model function unchanged.
//!
//! Adapter tensors live in the model's parameter map under
//! `{site}.lora_a`, `{site}.lora_b` and `{site}.magnitude`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{column_norms, flops, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{gaussian, Model, Param};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Lora,
    Dora,
}

/// Which base parameters receive an adapter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SelectorRepr", into = "SelectorRepr")]
pub enum TargetSelector {
    /// Every attention projection (Q, K, V, O) of a transformer.
    Attention,
    /// Every two-dimensional parameter.
    All2d,
    Explicit(Vec<String>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SelectorRepr {
    Named(String),
    List(Vec<String>),
}

impl TryFrom<SelectorRepr> for TargetSelector {
    type Error = String;

    fn try_from(r: SelectorRepr) -> std::result::Result<Self, String> {
        match r {
            SelectorRepr::Named(s) if s == "attention" => Ok(TargetSelector::Attention),
            SelectorRepr::Named(s) if s == "all_2d" => Ok(TargetSelector::All2d),
            SelectorRepr::Named(s) => Err(format!(
                "unknown target selector `{s}` (expected \"attention\", \"all_2d\" or a list of names)"
            )),
            SelectorRepr::List(v) => Ok(TargetSelector::Explicit(v)),
        }
    }
}

impl From<TargetSelector> for SelectorRepr {
    fn from(t: TargetSelector) -> Self {
        match t {
            TargetSelector::Attention => SelectorRepr::Named("attention".into()),
            TargetSelector::All2d => SelectorRepr::Named("all_2d".into()),
            TargetSelector::Explicit(v) => SelectorRepr::List(v),
        }
    }
}

impl TargetSelector {
    pub fn select(&self, model: &Model) -> Result<Vec<String>> {
        let names: Vec<String> = match self {
            TargetSelector::Attention => model.architecture().attention_matrices(),
            TargetSelector::All2d => model
                .params()
                .iter()
                .filter(|(_, p)| p.value.ndim() == 2)
                .map(|(n, _)| n.clone())
                .collect(),
            TargetSelector::Explicit(v) => {
                for n in v {
                    model
                        .param(n)
                        .map_err(|_| Error::config("adapter.targets", format!("no parameter named `{n}`")))?;
                }
                v.clone()
            }
        };
        if names.is_empty() {
            return Err(Error::config("adapter.targets", "selector matches no parameter"));
        }
        Ok(names)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub rank: usize,
    /// Scaling numerator; the update is multiplied by `alpha / rank`.
    /// Defaults to `rank`, i.e. a multiplier of one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub targets: TargetSelector,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_variant() -> Variant {
    Variant::Lora
}

fn default_init_std() -> f64 {
    DEFAULT_INIT_STD
}

impl AdapterSpec {
    pub fn lora(rank: usize, targets: TargetSelector) -> Self {
        AdapterSpec {
            rank,
            alpha: None,
            targets,
            variant: Variant::Lora,
            init_std: DEFAULT_INIT_STD,
        }
    }

    pub fn dora(rank: usize, targets: TargetSelector) -> Self {
        AdapterSpec {
            variant: Variant::Dora,
            ..AdapterSpec::lora(rank, targets)
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64) / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("adapter.rank", "must be at least 1"));
        }
        if !self.scaling().is_finite() {
            return Err(Error::config("adapter.alpha", "must be finite"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("adapter.init_std", "must be positive"));
        }
        Ok(())
    }
}

/// Per-site composition rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterSite {
    pub variant: Variant,
    pub rank: usize,
    pub scaling: f64,
}

pub fn lora_a_name(site: &str) -> String {
    format!("{site}.lora_a")
}

pub fn lora_b_name(site: &str) -> String {
    format!("{site}.lora_b")
}

pub fn magnitude_name(site: &str) -> String {
    format!("{site}.magnitude")
}

impl AdapterSite {
    pub(crate) fn compose(&self, tape: &Tape, site: &str, leaves: &BTreeMap<String, Var>) -> Result<Var> {
        let get = |n: &str| {
            leaves
                .get(n)
                .copied()
                .ok_or_else(|| Error::contract(format!("adapter tensor `{n}` missing")))
        };
        let base = get(site)?;
        let ba = tape.matmul(get(&lora_b_name(site))?, get(&lora_a_name(site))?)?;
        let ba = tape.scale(ba, self.scaling)?;
        let v = tape.add(base, ba)?;
        match self.variant {
            Variant::Lora => Ok(v),
            Variant::Dora => tape.col_norm_scale(v, get(&magnitude_name(site))?),
        }
    }

    pub(crate) fn compose_flops(&self, d: usize, k: usize) -> u64 {
        let lora = flops::matmul(d, self.rank, k) + 2 * flops::elementwise(d * k);
        match self.variant {
            Variant::Lora => lora,
            Variant::Dora => lora + flops::col_norm_scale(d, k),
        }
    }

    /// Trainable scalars this site adds for a `d×k` base.
    pub fn trainable_count(&self, d: usize, k: usize) -> usize {
        let lora = self.rank * (d + k);
        match self.variant {
            Variant::Lora => lora,
            Variant::Dora => lora + k,
        }
    }
}

/// Freezes every parameter of `model` and injects trainable adapters at the
/// sites chosen by `spec.targets`. Returns the selected site names.
pub fn attach(model: &mut Model, spec: &AdapterSpec, seed: u64) -> Result<Vec<String>> {
    spec.validate()?;
    if !model.adapters().is_empty() {
        return Err(Error::contract("model already carries adapters"));
    }
    let sites = spec.targets.select(model)?;
    let mut shapes = Vec::with_capacity(sites.len());
    for site in &sites {
        let p = model.param(site)?;
        let (d, k) = p.value.dims2().map_err(|_| {
            Error::contract(format!(
                "adapter target `{site}` has shape {:?}, expected a matrix",
                p.value.shape()
            ))
        })?;
        if spec.rank > d.min(k) {
            return Err(Error::config(
                "adapter.rank",
                format!("rank {} exceeds min(d, k) = {} at `{site}`", spec.rank, d.min(k)),
            ));
        }
        shapes.push((d, k));
    }

    for p in model.params_mut().values_mut() {
        p.frozen = true;
        p.grad = None;
    }
    let mut rng = rng::stream(seed, Stream::Adapter);
    let site_rule = AdapterSite {
        variant: spec.variant,
        rank: spec.rank,
        scaling: spec.scaling(),
    };
    for (site, &(d, k)) in sites.iter().zip(&shapes) {
        let a = gaussian(&mut rng, &[spec.rank, k], spec.init_std);
        let b = Tensor::zeros(&[d, spec.rank]);
        let base_norms = column_norms(&model.param(site)?.value);
        let params = model.params_mut();
        params.insert(lora_a_name(site), Param::trainable(a));
        params.insert(lora_b_name(site), Param::trainable(b));
        if spec.variant == Variant::Dora {
            params.insert(magnitude_name(site), Param::trainable(Tensor::vector(base_norms)));
        }
        model.adapters_mut().insert(site.clone(), site_rule);
    }
    Ok(sites)
}

/// Saved adapter state: the spec plus every adapter tensor by name.
///
/// Serialized as JSON; floats are written in shortest round-trip form, so
/// loading reproduces every value bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    pub spec: AdapterSpec,
    pub sites: BTreeMap<String, AdapterSite>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl AdapterCheckpoint {
    pub fn capture(model: &Model, spec: &AdapterSpec) -> Self {
        let mut tensors = BTreeMap::new();
        for site in model.adapters().keys() {
            for name in [lora_a_name(site), lora_b_name(site), magnitude_name(site)] {
                if let Ok(p) = model.param(&name) {
                    tensors.insert(name, p.value.clone());
                }
            }
        }
        AdapterCheckpoint {
            spec: spec.clone(),
            sites: model.adapters().clone(),
            tensors,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Installs the saved adapters on an adapter-free copy of the base model.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        if !model.adapters().is_empty() {
            return Err(Error::contract("model already carries adapters"));
        }
        for site in self.sites.keys() {
            model.param(site)?.value.dims2()?;
        }
        for p in model.params_mut().values_mut() {
            p.frozen = true;
            p.grad = None;
        }
        for (name, t) in &self.tensors {
            model.params_mut().insert(name.clone(), Param::trainable(t.clone()));
        }
        for (site, rule) in &self.sites {
            model.adapters_mut().insert(site.clone(), *rule);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_synthetic_lowrank;

    #[test]
    fn trainable_counts() {
        let lora = AdapterSite {
            variant: Variant::Lora,
            rank: 3,
            scaling: 1.0,
        };
        assert_eq!(lora.trainable_count(10, 7), 3 * 17);
        let dora = AdapterSite {
            variant: Variant::Dora,
            ..lora
        };
        assert_eq!(dora.trainable_count(10, 7), 3 * 17 + 7);
    }

    #[test]
    fn selector_errors() {
        let mut m = make_synthetic_lowrank(6, 5, 2, 0.0, 64, 0).unwrap().model;
        let err = attach(&mut m, &AdapterSpec::lora(2, TargetSelector::Attention), 0).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        let err = attach(&mut m, &AdapterSpec::lora(2, TargetSelector::Explicit(vec!["nope".into()])), 0)
            .unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn non_matrix_target_is_contract_error() {
        let mut m = crate::model::make_mlp(3, 4, 2, 0).unwrap();
        let err = attach(&mut m, &AdapterSpec::lora(1, TargetSelector::Explicit(vec!["b1".into()])), 0)
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn alpha_equal_rank_is_plain_sum() {
        let mut m = make_synthetic_lowrank(4, 3, 1, 0.0, 64, 1).unwrap().model;
        let w0 = m.param("w").unwrap().value.clone();
        let mut spec = AdapterSpec::lora(2, TargetSelector::All2d);
        spec.alpha = Some(2.0);
        attach(&mut m, &spec, 1).unwrap();
        let b = Tensor::from_rows(&[[1.0, 0.5], [0.0, -1.0], [2.0, 0.0], [0.25, 0.25]]);
        m.param_mut("w.lora_b").unwrap().value = b.clone();
        let a = m.param("w.lora_a").unwrap().value.clone();
        let expected = w0.add(&b.matmul(&a).unwrap()).unwrap();
        assert_eq!(m.effective_weight("w").unwrap(), expected);
    }

    #[test]
    fn selector_serde_forms() {
        #[derive(Serialize, Deserialize)]
        struct Wrap {
            t: TargetSelector,
        }
        let a: Wrap = toml::from_str("t = \"attention\"").unwrap();
        assert_eq!(a.t, TargetSelector::Attention);
        let b: Wrap = toml::from_str("t = [\"w\", \"x\"]").unwrap();
        assert_eq!(b.t, TargetSelector::Explicit(vec!["w".into(), "x".into()]));
        assert!(toml::from_str::<Wrap>("t = \"mlp\"").is_err());
    }
}
