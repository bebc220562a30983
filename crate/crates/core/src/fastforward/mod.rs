//! Line-search acceleration along the most recent optimizer update.
//!
//! After every interval of regular optimizer steps the last weight delta
//! `Δ = W_t − W_{t−1}` is captured and the trainable weights are moved to
//! `W_t + τ·Δ` for `τ = 1, 2, …` while the loss on a tiny validation set keeps
//! strictly improving. The first probe that does not improve is reverted, so
//! the stage ends at the best `τ*`. Optimizer state is never touched here.

mod schedule;

pub use schedule::{
    run_schedule, run_schedule_with, EvalCadence, RunOutcome, ScheduleConfig, StepKind, StopCriterion,
    StopReason, TrainLog, TrainLogRow, Trainer,
};

use serde::{Deserialize, Serialize};

use crate::accounting::{Category, FlopsLedger, FF_SET_FLOPS_PER_SCALAR};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FastForwardConfig {
    /// When false the schedule runs plain optimizer steps only.
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Optimizer steps between stages.
    #[serde(default = "default_interval")]
    pub interval: usize,
    #[serde(default = "default_interval")]
    pub warmup_steps: usize,
    /// Cap on accepted simulated steps per stage.
    #[serde(default = "default_max_ff_steps")]
    pub max_ff_steps: usize,
    /// Consecutive stages with `τ* = 0` after which acceleration is switched
    /// off for the rest of the run.
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn yes() -> bool {
    true
}
fn default_interval() -> usize {
    6
}
fn default_max_ff_steps() -> usize {
    100
}
fn default_patience() -> usize {
    3
}

impl Default for FastForwardConfig {
    fn default() -> Self {
        FastForwardConfig {
            enabled: true,
            interval: default_interval(),
            warmup_steps: default_interval(),
            max_ff_steps: default_max_ff_steps(),
            patience: default_patience(),
        }
    }
}

impl FastForwardConfig {
    pub fn disabled() -> Self {
        FastForwardConfig {
            enabled: false,
            ..FastForwardConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval < 1 {
            return Err(Error::config("fast_forward.interval", "must be at least 1"));
        }
        if self.patience < 1 {
            return Err(Error::config("fast_forward.patience", "must be at least 1"));
        }
        Ok(())
    }
}

/// Flat weight delta over the trainable set.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub delta: Tensor,
    /// Optimizer step count at which `delta` was captured.
    pub step: usize,
}

pub fn capture_direction(prev: &Tensor, curr: &Tensor, step: usize) -> Result<Direction> {
    if prev.numel() != curr.numel() {
        return Err(Error::contract(format!(
            "snapshots differ in length: {} vs {}",
            prev.numel(),
            curr.numel()
        )));
    }
    Ok(Direction {
        delta: curr.sub(prev)?,
        step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageEnd {
    /// A probe failed to improve and was reverted.
    NoImprovement,
    /// `max_ff_steps` probes all improved.
    Cap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub index: usize,
    pub entry_step: usize,
    pub tau_star: usize,
    /// Validation loss at `τ = 0, 1, …` for every evaluated probe.
    pub val_losses: Vec<f64>,
    pub forward_passes: usize,
    /// Probes whose weights were formed (excludes the `τ = 0` evaluation).
    pub probes: usize,
    pub flops: u64,
    pub end: StageEnd,
    pub grad_norm: Option<f64>,
    pub cond_mean: Option<f64>,
    pub cond_per_matrix: Vec<(String, Option<f64>)>,
    pub batch_consistency: Option<f64>,
}

impl StageRecord {
    /// Validation loss at the accepted point (the sequence minimum if the
    /// record holds fewer entries than `τ* + 1`).
    pub fn best_loss(&self) -> f64 {
        self.val_losses
            .get(self.tau_star)
            .copied()
            .unwrap_or_else(|| self.val_losses.iter().copied().fold(f64::INFINITY, f64::min))
    }
}

/// Observer for each validation evaluation inside a stage: `(τ, loss, ledger)`.
pub type ProbeObserver<'a> = dyn FnMut(usize, f64, &FlopsLedger) + 'a;

/// Weights `entry + τ·Δ`, computed from the entry snapshot each time so a
/// revert reproduces the accepted point bit-for-bit.
pub fn point_along(entry: &Tensor, delta: &Tensor, tau: usize) -> Result<Tensor> {
    entry.axpy(tau as f64, delta)
}

/// Runs one line-search stage from the model's current weights.
///
/// Charges every validation forward pass to `ff_val_forward` and every
/// formed probe to `ff_param_set`. On error the weights are restored to the
/// entry point.
pub fn fast_forward_stage(
    model: &mut Model,
    dir: &Direction,
    max_ff_steps: usize,
    val: &Batch,
    ledger: &mut FlopsLedger,
    observer: &mut ProbeObserver<'_>,
) -> Result<StageRecord> {
    let entry = model.snapshot_trainable();
    if dir.delta.numel() != entry.numel() {
        return Err(Error::contract(format!(
            "direction has {} values but the trainable set holds {}",
            dir.delta.numel(),
            entry.numel()
        )));
    }
    let set_cost = FF_SET_FLOPS_PER_SCALAR * entry.numel() as u64;
    let before = ledger.total();

    let first = model.evaluate(val)?;
    ledger.charge(Category::FfValForward, first.forward_flops);
    observer(0, first.loss, ledger);
    let mut losses = vec![first.loss];
    let mut best = first.loss;
    let mut tau_star = 0;
    let mut probes = 0;
    let mut end = StageEnd::Cap;

    for tau in 1..=max_ff_steps {
        let point = point_along(&entry, &dir.delta, tau)?;
        model.restore_trainable(&point)?;
        ledger.charge(Category::FfParamSet, set_cost);
        probes += 1;
        let eval = match model.evaluate(val) {
            Ok(e) => e,
            Err(e) => {
                model.restore_trainable(&entry)?;
                return Err(e);
            }
        };
        ledger.charge(Category::FfValForward, eval.forward_flops);
        observer(tau, eval.loss, ledger);
        losses.push(eval.loss);
        if eval.loss < best {
            best = eval.loss;
            tau_star = tau;
        } else {
            let back = if tau_star == 0 {
                entry.clone()
            } else {
                point_along(&entry, &dir.delta, tau_star)?
            };
            model.restore_trainable(&back)?;
            end = StageEnd::NoImprovement;
            break;
        }
    }

    Ok(StageRecord {
        index: 0,
        entry_step: dir.step,
        tau_star,
        forward_passes: losses.len(),
        val_losses: losses,
        probes,
        flops: ledger.total() - before,
        end,
        grad_norm: None,
        cond_mean: None,
        cond_per_matrix: Vec::new(),
        batch_consistency: None,
    })
}

/// Pluggable stage runner used by the schedule.
pub trait StageExecutor {
    fn run_stage(
        &mut self,
        model: &mut Model,
        dir: &Direction,
        val: &Batch,
        ledger: &mut FlopsLedger,
        observer: &mut ProbeObserver<'_>,
    ) -> Result<StageRecord>;
}

/// The standard executor: [`fast_forward_stage`] with a fixed cap.
#[derive(Debug, Clone, Copy)]
pub struct LineSearch {
    pub max_ff_steps: usize,
}

impl StageExecutor for LineSearch {
    fn run_stage(
        &mut self,
        model: &mut Model,
        dir: &Direction,
        val: &Batch,
        ledger: &mut FlopsLedger,
        observer: &mut ProbeObserver<'_>,
    ) -> Result<StageRecord> {
        fast_forward_stage(model, dir, self.max_ff_steps, val, ledger, observer)
    }
}

/// Permanent switch-off after `patience` consecutive stages with `τ* = 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchPolicy {
    patience: usize,
    consecutive_failures: usize,
    disabled_after_stage: Option<usize>,
}

impl SwitchPolicy {
    pub fn new(patience: usize) -> Self {
        SwitchPolicy {
            patience,
            consecutive_failures: 0,
            disabled_after_stage: None,
        }
    }

    pub fn active(&self) -> bool {
        self.disabled_after_stage.is_none()
    }

    /// Index of the stage after which acceleration was switched off.
    pub fn disabled_after_stage(&self) -> Option<usize> {
        self.disabled_after_stage
    }

    pub fn observe(&mut self, stage_index: usize, tau_star: usize) {
        if !self.active() {
            return;
        }
        if tau_star == 0 {
            self.consecutive_failures += 1;
            if self.consecutive_failures >= self.patience {
                self.disabled_after_stage = Some(stage_index);
            }
        } else {
            self.consecutive_failures = 0;
        }
    }
}
