//! FLOPs ledger.
//!
//! Cost model:
//! * a training pass is charged its forward FLOPs (tape count) to
//!   `forward_train` and exactly twice that to `backward_train`;
//! * an Adam update is charged [`ADAM_FLOPS_PER_SCALAR`] per trainable scalar,
//!   a plain SGD update [`SGD_FLOPS_PER_SCALAR`];
//! * each line-search probe is charged one validation forward pass to
//!   `ff_val_forward` and [`FF_SET_FLOPS_PER_SCALAR`] per trainable scalar to
//!   `ff_param_set` for forming `W_t + τ·Δ`;
//! * analysis evaluations (loss-plane cells) go to `eval_forward`.
//!
//! Test-set evaluations used to decide when a run stops are not charged in
//! either arm of a comparison.

use serde::Serialize;

use crate::data::Batch;
use crate::model::Model;

pub const ADAM_FLOPS_PER_SCALAR: u64 = 10;
pub const SGD_FLOPS_PER_SCALAR: u64 = 2;
/// One multiply and one add per scalar.
pub const FF_SET_FLOPS_PER_SCALAR: u64 = 2;
/// Backward pass cost relative to forward.
pub const BACKWARD_FORWARD_RATIO: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    ForwardTrain,
    BackwardTrain,
    OptimizerUpdate,
    FfValForward,
    FfParamSet,
    EvalForward,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::ForwardTrain,
        Category::BackwardTrain,
        Category::OptimizerUpdate,
        Category::FfValForward,
        Category::FfParamSet,
        Category::EvalForward,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FlopsLedger {
    counts: [u64; 6],
    total: u64,
    /// Tape-reported backward cost, excluded from `total`.
    backward_exact: u64,
}

impl FlopsLedger {
    pub fn new() -> Self {
        FlopsLedger::default()
    }

    pub fn charge(&mut self, category: Category, flops: u64) {
        self.counts[category.slot()] += flops;
        self.total += flops;
    }

    /// A forward+backward training pass with the given forward cost.
    pub fn charge_training_pass(&mut self, forward: u64, backward_exact: u64) {
        self.charge(Category::ForwardTrain, forward);
        self.charge(Category::BackwardTrain, BACKWARD_FORWARD_RATIO * forward);
        self.backward_exact += backward_exact;
    }

    pub fn get(&self, category: Category) -> u64 {
        self.counts[category.slot()]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn backward_exact(&self) -> u64 {
        self.backward_exact
    }

    pub fn sum_of_categories(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Forward FLOPs of one pass of `model` over a batch shaped like `batch`.
pub fn forward_flops_estimate(model: &Model, batch: &Batch) -> u64 {
    model.forward_flops(batch)
}

/// Fraction of the baseline's FLOPs saved by the accelerated run; negative
/// when the accelerated run spent more.
pub fn savings(baseline: &FlopsLedger, ff: &FlopsLedger) -> f64 {
    1.0 - ff.total() as f64 / baseline.total() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn charges() {
        let mut l = FlopsLedger::new();
        l.charge(Category::ForwardTrain, 100);
        assert_eq!(l.total(), 100);
        l.charge_training_pass(50, 123);
        assert_eq!(l.get(Category::BackwardTrain), 100);
        assert_eq!(l.total(), 250);
        assert_eq!(l.backward_exact(), 123);
    }

    #[test]
    fn savings_examples() {
        let mut a = FlopsLedger::new();
        a.charge(Category::ForwardTrain, 1000);
        assert_eq!(savings(&a, &a.clone()), 0.0);
        let mut b = FlopsLedger::new();
        b.charge(Category::OptimizerUpdate, 500);
        assert_eq!(savings(&a, &b), 0.5);
        b.charge(Category::OptimizerUpdate, 1000);
        assert!(savings(&a, &b) < 0.0);
    }

    proptest! {
        #[test]
        fn total_is_sum_of_categories(charges in prop::collection::vec((0usize..6, 0u64..1_000_000), 0..64)) {
            let mut l = FlopsLedger::new();
            let mut prev = l.clone();
            for (c, f) in charges {
                if c == 0 {
                    l.charge_training_pass(f, f);
                } else {
                    l.charge(Category::ALL[c], f);
                }
                prop_assert_eq!(l.total(), l.sum_of_categories());
                for cat in Category::ALL {
                    prop_assert!(l.get(cat) >= prev.get(cat));
                }
                prev = l.clone();
            }
        }
    }
}
