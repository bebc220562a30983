//! Analyses built on the schedule: the target-loss comparison and its
//! sweeps, loss-plane slices, gradient similarity, line-search duration
//! curves and stage diagnostics.

mod diagnostics;
mod gradsim;
mod plane;

pub use diagnostics::{mean_pairwise_cosine, stage_diagnostics, StageDiagnostics, SIGMA_FLOOR};
pub use gradsim::{grad_similarity_matrix, GradHistory, SimilarityEntry, SimilarityMatrix};
pub use plane::{loss_plane, PlaneGrid};

use serde::Serialize;

use crate::accounting::{savings, Category, FlopsLedger, FF_SET_FLOPS_PER_SCALAR};
use crate::adapters::{attach, AdapterSpec};
use crate::data::{Batch, Splits};
use crate::error::{Error, Result};
use crate::fastforward::{
    point_along, run_schedule, run_schedule_with, Direction, ProbeObserver, RunOutcome, ScheduleConfig,
    StageEnd, StageExecutor, StageRecord, StopCriterion,
};
use crate::model::Model;
use crate::optim::{AdamConfig, AdamState, Optimizer};

pub const DEFAULT_RANKS: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];
pub const DEFAULT_DURATION_STEPS: usize = 100;

/// A model before adapter attachment plus its data splits.
#[derive(Debug, Clone)]
pub struct Task {
    pub base: Model,
    pub data: Splits,
    pub adapter: Option<AdapterSpec>,
    pub seed: u64,
}

impl Task {
    /// Fresh copy of the base with adapters attached (if any).
    pub fn prepared_model(&self) -> Result<Model> {
        let mut m = self.base.clone();
        if let Some(spec) = &self.adapter {
            attach(&mut m, spec, self.seed)?;
        }
        Ok(m)
    }

    fn with_adapter(&self, adapter: Option<AdapterSpec>) -> Task {
        Task {
            adapter,
            ..self.clone()
        }
    }
}

/// Training settings shared by both arms of a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub adam: AdamConfig,
    pub schedule: ScheduleConfig,
    /// Length of the baseline run whose final test loss becomes the target.
    pub baseline_epochs: usize,
    pub eps: f64,
}

impl Protocol {
    fn optimizer(&self) -> Optimizer {
        Optimizer::Adam(AdamState::new(self.adam))
    }

    fn schedule_with_ff(&self, enabled: bool) -> ScheduleConfig {
        let mut s = self.schedule.clone();
        s.fast_forward.enabled = enabled;
        s
    }
}

pub fn run_baseline(task: &Task, protocol: &Protocol) -> Result<RunOutcome> {
    run_schedule(
        task.prepared_model()?,
        protocol.optimizer(),
        &task.data,
        &protocol.schedule_with_ff(false),
        StopCriterion::Epochs(protocol.baseline_epochs),
        task.seed,
    )
}

/// Accelerated run stopping once the test loss is within `eps` of `target`.
pub fn run_to_target(task: &Task, protocol: &Protocol, target: f64) -> Result<RunOutcome> {
    run_schedule(
        task.prepared_model()?,
        protocol.optimizer(),
        &task.data,
        &protocol.schedule_with_ff(true),
        StopCriterion::target_loss(target, protocol.eps),
        task.seed,
    )
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub baseline: RunOutcome,
    pub ff: RunOutcome,
    pub target: f64,
    /// `None` when the accelerated arm never reached the target.
    pub savings: Option<f64>,
}

/// Target-loss protocol: the baseline trains for a fixed number of epochs,
/// then the accelerated arm trains until it matches the baseline's final test
/// loss. Savings compare total FLOPs at those two stopping points.
pub fn compare(task: &Task, protocol: &Protocol) -> Result<Comparison> {
    let baseline = run_baseline(task, protocol)?;
    let target = baseline.final_test_loss;
    let ff = run_to_target(task, protocol, target)?;
    let s = ff.reached_target().then(|| savings(&baseline.ledger, &ff.ledger));
    Ok(Comparison {
        baseline,
        ff,
        target,
        savings: s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub key: String,
    pub baseline_flops: u64,
    pub ff_flops: u64,
    pub savings: Option<f64>,
}

impl SweepRow {
    pub fn from_comparison(key: impl Into<String>, c: &Comparison) -> Self {
        SweepRow {
            key: key.into(),
            baseline_flops: c.baseline.ledger.total(),
            ff_flops: c.ff.ledger.total(),
            savings: c.savings,
        }
    }
}

/// Largest adapter rank the task's targets admit.
pub fn max_feasible_rank(task: &Task) -> Result<usize> {
    let spec = task
        .adapter
        .as_ref()
        .ok_or_else(|| Error::config("adapter", "rank sweep needs an adapter section"))?;
    let mut max = usize::MAX;
    for name in spec.targets.select(&task.base)? {
        let (d, k) = task.base.param(&name)?.value.dims2()?;
        max = max.min(d.min(k));
    }
    Ok(max)
}

/// One comparison per feasible rank; infeasible ranks are skipped.
pub fn rank_sweep(task: &Task, ranks: &[usize], protocol: &Protocol) -> Result<Vec<SweepRow>> {
    let max = max_feasible_rank(task)?;
    let spec = task.adapter.clone().expect("checked by max_feasible_rank");
    let mut rows = Vec::new();
    for &r in ranks.iter().filter(|&&r| r >= 1 && r <= max) {
        let t = task.with_adapter(Some(AdapterSpec { rank: r, ..spec.clone() }));
        rows.push(SweepRow::from_comparison(r.to_string(), &compare(&t, protocol)?));
    }
    if rows.is_empty() {
        return Err(Error::config("sweep.ranks", format!("no rank in {ranks:?} is feasible (max {max})")));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntervalPoint {
    pub interval: usize,
    /// `None` if the run ended before a second stage.
    pub tau_star: Option<usize>,
}

/// τ* of the second stage for each interval length.
pub fn interval_sweep(task: &Task, intervals: &[usize], protocol: &Protocol) -> Result<Vec<IntervalPoint>> {
    let mut out = Vec::new();
    for &interval in intervals {
        let mut cfg = protocol.schedule_with_ff(true);
        cfg.fast_forward.interval = interval;
        cfg.max_stages = Some(2);
        let run = run_schedule(
            task.prepared_model()?,
            protocol.optimizer(),
            &task.data,
            &cfg,
            StopCriterion::target_loss(f64::NEG_INFINITY, 0.0),
            task.seed,
        )?;
        out.push(IntervalPoint {
            interval,
            tau_star: run.stages.get(1).map(|s| s.tau_star),
        });
    }
    Ok(out)
}

/// Evaluates every `τ = 0..=fixed_steps` regardless of the stop rule, then
/// leaves the weights where the stop rule would have, so later stages follow
/// the regular trajectory. The full curve is kept in `val_losses`.
#[derive(Debug, Clone)]
pub struct DurationExecutor {
    pub fixed_steps: usize,
}

/// Stop-rule τ* on a full curve: the last index of the strictly decreasing
/// prefix.
pub fn stop_rule_tau(curve: &[f64]) -> usize {
    let mut best = 0;
    for tau in 1..curve.len() {
        if curve[tau] < curve[best] {
            best = tau;
        } else {
            break;
        }
    }
    best
}

impl StageExecutor for DurationExecutor {
    fn run_stage(
        &mut self,
        model: &mut Model,
        dir: &Direction,
        val: &Batch,
        ledger: &mut FlopsLedger,
        observer: &mut ProbeObserver<'_>,
    ) -> Result<StageRecord> {
        let entry = model.snapshot_trainable();
        let before = ledger.total();
        let mut curve = Vec::with_capacity(self.fixed_steps + 1);
        for tau in 0..=self.fixed_steps {
            if tau > 0 {
                model.restore_trainable(&point_along(&entry, &dir.delta, tau)?)?;
                ledger.charge(Category::FfParamSet, FF_SET_FLOPS_PER_SCALAR * entry.numel() as u64);
            }
            let e = match model.evaluate(val) {
                Ok(e) => e,
                Err(err) => {
                    model.restore_trainable(&entry)?;
                    return Err(err);
                }
            };
            ledger.charge(Category::FfValForward, e.forward_flops);
            observer(tau, e.loss, ledger);
            curve.push(e.loss);
        }
        let tau_star = stop_rule_tau(&curve);
        model.restore_trainable(&point_along(&entry, &dir.delta, tau_star)?)?;
        Ok(StageRecord {
            index: 0,
            entry_step: dir.step,
            tau_star,
            forward_passes: curve.len(),
            probes: self.fixed_steps,
            val_losses: curve,
            flops: ledger.total() - before,
            end: if tau_star == self.fixed_steps {
                StageEnd::Cap
            } else {
                StageEnd::NoImprovement
            },
            grad_norm: None,
            cond_mean: None,
            cond_per_matrix: Vec::new(),
            batch_consistency: None,
        })
    }
}

/// Full validation-loss curves for the first `stages` stages.
pub fn ff_duration_probe(task: &Task, protocol: &Protocol, fixed_steps: usize, stages: usize) -> Result<RunOutcome> {
    let mut cfg = protocol.schedule_with_ff(true);
    cfg.max_stages = Some(stages.max(1));
    // τ* = 0 stages are still probed in full.
    cfg.fast_forward.patience = usize::MAX;
    run_schedule_with(
        task.prepared_model()?,
        protocol.optimizer(),
        &task.data,
        &cfg,
        StopCriterion::target_loss(f64::NEG_INFINITY, 0.0),
        task.seed,
        &mut DurationExecutor { fixed_steps },
    )
}

#[derive(Debug, Clone)]
pub struct FullRankProbe {
    pub trainable: Vec<String>,
    pub outcome: RunOutcome,
}

impl FullRankProbe {
    /// Fraction of stages with `τ* = 0`.
    pub fn tau_zero_rate(&self) -> Option<f64> {
        let s = &self.outcome.stages;
        (!s.is_empty()).then(|| s.iter().filter(|r| r.tau_star == 0).count() as f64 / s.len() as f64)
    }
}

/// Runs the accelerated schedule without adapters, training either every
/// parameter or only the attention projections.
pub fn fullrank_probe(task: &Task, restrict_attention: bool, protocol: &Protocol) -> Result<FullRankProbe> {
    let mut model = task.base.clone();
    if restrict_attention {
        let attn = model.architecture().attention_matrices();
        if attn.is_empty() {
            return Err(Error::config("task", "attention-only probe needs a transformer task"));
        }
        model.set_trainable(|n| attn.iter().any(|a| a == n))?;
    } else {
        model.set_trainable(|_| true)?;
    }
    let trainable = model.trainable_names().into_iter().map(String::from).collect();
    let outcome = run_schedule(
        model,
        protocol.optimizer(),
        &task.data,
        &protocol.schedule_with_ff(true),
        StopCriterion::Epochs(protocol.baseline_epochs),
        task.seed,
    )?;
    Ok(FullRankProbe { trainable, outcome })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_rule_tau_examples() {
        assert_eq!(stop_rule_tau(&[12.5, 8.0, 4.5, 2.0, 0.5, 0.0, 0.5, 2.0]), 5);
        assert_eq!(stop_rule_tau(&[1.0, 1.0, 0.0]), 0);
        assert_eq!(stop_rule_tau(&[3.0, 2.0, 1.0]), 2);
    }
}
