//! Adam and plain SGD over a model's trainable parameters.
//!
//! Adam here has no weight decay, no clipping and a constant learning rate.
//! Plain SGD equals Adam with `β₁ = β₂ = 0` only up to the `√v̂ + ε`
//! normalization, which turns SGD's `g` into roughly `sign(g)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::accounting::{Category, FlopsLedger, ADAM_FLOPS_PER_SCALAR, SGD_FLOPS_PER_SCALAR};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::with_lr(default_lr())
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("optimizer.lr", "must be a non-negative finite number"));
        }
        for (key, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }
}

/// One Adam update of every trainable parameter from its stored gradient.
pub fn adam_step(model: &mut Model, state: &mut AdamState, ledger: &mut FlopsLedger) -> Result<()> {
    let cfg = state.config;
    let t = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut scalars = 0usize;
    for (name, p) in model.params_mut().iter_mut().filter(|(_, p)| !p.frozen) {
        let g = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?;
        let mom = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            first: Tensor::zeros(p.value.shape()),
            second: Tensor::zeros(p.value.shape()),
        });
        if mom.first.shape() != p.value.shape() {
            return Err(Error::contract(format!("optimizer state for `{name}` has the wrong shape")));
        }
        let (m, v) = (mom.first.data_mut(), mom.second.data_mut());
        for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        if !p.value.is_finite() {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        scalars += p.value.numel();
    }
    state.step = t;
    ledger.charge(Category::OptimizerUpdate, ADAM_FLOPS_PER_SCALAR * scalars as u64);
    Ok(())
}

/// `w ← w − lr·g` for every trainable parameter.
pub fn sgd_step(model: &mut Model, lr: f64, ledger: &mut FlopsLedger) -> Result<()> {
    let mut scalars = 0usize;
    for (name, p) in model.params_mut().iter_mut().filter(|(_, p)| !p.frozen) {
        let g = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?;
        for (w, &gi) in p.value.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * gi;
        }
        if !p.value.is_finite() {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
        scalars += p.value.numel();
    }
    ledger.charge(Category::OptimizerUpdate, SGD_FLOPS_PER_SCALAR * scalars as u64);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn step(&mut self, model: &mut Model, ledger: &mut FlopsLedger) -> Result<()> {
        match self {
            Optimizer::Adam(state) => adam_step(model, state, ledger),
            Optimizer::Sgd { lr } => sgd_step(model, *lr, ledger),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Param};

    fn scalar_model(w: f64) -> Model {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Param::trainable(Tensor::from_rows(&[[w]])));
        Model::new(Architecture::Regression { d: 1, k: 1 }, params).unwrap()
    }

    fn set_grad(m: &mut Model, g: f64) {
        m.param_mut("w").unwrap().grad = Some(Tensor::from_rows(&[[g]]));
    }

    #[test]
    fn first_adam_step_matches_hand_computation() {
        let mut m = scalar_model(0.0);
        set_grad(&mut m, 1.0);
        let mut st = AdamState::new(AdamConfig::with_lr(0.1));
        let mut ledger = FlopsLedger::new();
        adam_step(&mut m, &mut st, &mut ledger).unwrap();
        // m̂ = 1, v̂ = 1 → update = −0.1 / (1 + 1e-8)
        let expected = -0.1 / (1.0 + 1e-8);
        assert_eq!(m.param("w").unwrap().value.data()[0], expected);
        assert_eq!(st.step_count(), 1);
        assert_eq!(ledger.get(Category::OptimizerUpdate), ADAM_FLOPS_PER_SCALAR);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = scalar_model(0.7);
        set_grad(&mut m, 0.0);
        let mut st = AdamState::new(AdamConfig::with_lr(0.1));
        adam_step(&mut m, &mut st, &mut FlopsLedger::new()).unwrap();
        assert_eq!(m.param("w").unwrap().value.data()[0], 0.7);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut m = scalar_model(0.7);
        let mut st = AdamState::new(AdamConfig::with_lr(0.1));
        assert!(matches!(
            adam_step(&mut m, &mut st, &mut FlopsLedger::new()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn identical_parameters_follow_identical_trajectories() {
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), Param::trainable(Tensor::vector(vec![0.3])));
        params.insert("b".to_string(), Param::trainable(Tensor::vector(vec![0.3])));
        let mut m = Model::new(Architecture::Regression { d: 1, k: 1 }, params).unwrap();
        let mut st = AdamState::new(AdamConfig::with_lr(0.05));
        for i in 0..20 {
            let g = (i as f64).sin();
            for n in ["a", "b"] {
                m.param_mut(n).unwrap().grad = Some(Tensor::vector(vec![g]));
            }
            adam_step(&mut m, &mut st, &mut FlopsLedger::new()).unwrap();
        }
        assert_eq!(m.param("a").unwrap().value, m.param("b").unwrap().value);
    }

    #[test]
    fn sgd_examples() {
        let mut m = scalar_model(1.0);
        set_grad(&mut m, 1.0); // L = ½w², g = w
        sgd_step(&mut m, 0.0, &mut FlopsLedger::new()).unwrap();
        assert_eq!(m.param("w").unwrap().value.data()[0], 1.0);
        sgd_step(&mut m, 0.5, &mut FlopsLedger::new()).unwrap();
        assert_eq!(m.param("w").unwrap().value.data()[0], 0.5);
    }
}
