//! The training loop: warmup, then alternating optimizer intervals and
//! line-search stages until a stop criterion fires.

use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{capture_direction, FastForwardConfig, LineSearch, StageExecutor, StageRecord, SwitchPolicy};
use crate::accounting::FlopsLedger;
use crate::data::{Batch, EpochSampler, Splits};
use crate::error::{Error, Result};
use crate::experiments::{stage_diagnostics, GradHistory};
use crate::model::{Model, PassCost};
use crate::optim::Optimizer;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Warmup,
    Sgd,
    FfProbe,
    FfCommit,
    Eval,
}

impl StepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Warmup => "warmup",
            StepKind::Sgd => "sgd",
            StepKind::FfProbe => "ff_probe",
            StepKind::FfCommit => "ff_commit",
            StepKind::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLogRow {
    /// Optimizer steps taken so far.
    pub step: usize,
    pub kind: StepKind,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub flops: FlopsLedger,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    /// Training losses of the optimizer steps, in order.
    pub fn train_losses(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| matches!(r.kind, StepKind::Warmup | StepKind::Sgd))
            .filter_map(|r| r.train_loss)
            .collect()
    }

    pub fn last_test_loss(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.test_loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCadence {
    /// After warmup, every interval and every stage.
    Interval,
    /// After every optimizer step and every stage.
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StopCriterion {
    /// Test loss ≤ `target + eps`.
    TargetLoss { target: f64, eps: f64 },
    Epochs(usize),
    Steps(usize),
    /// No test-loss improvement larger than `min_delta` for `patience`
    /// consecutive evaluations.
    Convergence { patience: usize, min_delta: f64 },
}

impl StopCriterion {
    pub fn target_loss(target: f64, eps: f64) -> Self {
        StopCriterion::TargetLoss { target, eps }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StopCriterion::TargetLoss { target, eps } => {
                if target.is_nan() || !(eps >= 0.0) {
                    return Err(Error::config("stop.target_loss", "target must be a number and eps ≥ 0"));
                }
            }
            StopCriterion::Epochs(0) => return Err(Error::config("stop.epochs", "must be at least 1")),
            StopCriterion::Steps(0) => return Err(Error::config("stop.steps", "must be at least 1")),
            StopCriterion::Convergence { patience, min_delta } if patience == 0 || !(min_delta >= 0.0) => {
                return Err(Error::config("stop.convergence", "patience ≥ 1 and min_delta ≥ 0 required"));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetReached,
    Epochs,
    Steps,
    Converged,
    StageLimit,
    /// Safety cap on epochs hit before the criterion fired.
    Budget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub batch_size: usize,
    pub fast_forward: FastForwardConfig,
    pub eval_cadence: EvalCadence,
    /// Hard cap on training epochs regardless of the stop criterion.
    pub max_epochs: usize,
    /// End the run after this many line-search stages.
    pub max_stages: Option<usize>,
    pub record_wall_time: bool,
    /// Gradient snapshots kept for similarity analysis (0 disables).
    pub grad_history: usize,
    /// Batches used for the gradient-consistency diagnostic (0 disables).
    pub consistency_batches: usize,
}

impl ScheduleConfig {
    pub fn new(batch_size: usize, fast_forward: FastForwardConfig) -> Self {
        ScheduleConfig {
            batch_size,
            fast_forward,
            eval_cadence: EvalCadence::Interval,
            max_epochs: 200,
            max_stages: None,
            record_wall_time: false,
            grad_history: 0,
            consistency_batches: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be at least 1"));
        }
        if self.consistency_batches == 1 {
            return Err(Error::config("train.consistency_batches", "needs at least 2 batches"));
        }
        self.fast_forward.validate()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub optimizer: Optimizer,
    pub log: TrainLog,
    pub stages: Vec<StageRecord>,
    pub ledger: FlopsLedger,
    pub stop: StopReason,
    pub steps: usize,
    pub final_test_loss: f64,
    pub ff_disabled_after_stage: Option<usize>,
    pub grad_history: Option<GradHistory>,
}

impl RunOutcome {
    pub fn reached_target(&self) -> bool {
        self.stop == StopReason::TargetReached
    }
}

/// Step-level driver behind [`run_schedule`]; exposed so callers can
/// interleave their own checks between steps and stages.
pub struct Trainer<'d> {
    model: Model,
    optimizer: Optimizer,
    data: &'d Splits,
    cfg: ScheduleConfig,
    sampler: EpochSampler,
    seed: u64,
    ledger: FlopsLedger,
    log: TrainLog,
    stages: Vec<StageRecord>,
    policy: SwitchPolicy,
    steps: usize,
    grads: Option<GradHistory>,
    started: Option<Instant>,
}

impl<'d> Trainer<'d> {
    pub fn new(model: Model, optimizer: Optimizer, data: &'d Splits, cfg: ScheduleConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if data.val.example_count() == 0 {
            return Err(Error::contract("validation set is empty"));
        }
        let sampler = EpochSampler::new(data.train.example_count(), cfg.batch_size, seed)?;
        let grads = (cfg.grad_history > 0).then(|| GradHistory::new(cfg.grad_history));
        let started = cfg.record_wall_time.then(Instant::now);
        Ok(Trainer {
            model,
            optimizer,
            data,
            policy: SwitchPolicy::new(cfg.fast_forward.patience),
            cfg,
            sampler,
            seed,
            ledger: FlopsLedger::new(),
            log: TrainLog::default(),
            stages: Vec::new(),
            steps: 0,
            grads,
            started,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn ledger(&self) -> &FlopsLedger {
        &self.ledger
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn stages(&self) -> &[StageRecord] {
        &self.stages
    }

    pub fn ff_active(&self) -> bool {
        self.cfg.fast_forward.enabled
            && self.policy.active()
            && self.cfg.max_stages.is_none_or(|m| self.stages.len() < m)
    }

    fn wall_ms(&self) -> f64 {
        self.started
            .map(|t| t.elapsed().as_secs_f64() * 1e3)
            .unwrap_or(0.0)
    }

    fn push_row(&mut self, kind: StepKind, train: Option<f64>, val: Option<f64>, test: Option<f64>) {
        let row = TrainLogRow {
            step: self.steps,
            kind,
            train_loss: train,
            val_loss: val,
            test_loss: test,
            flops: self.ledger.clone(),
            wall_ms: self.wall_ms(),
        };
        self.log.rows.push(row);
    }

    /// One optimizer step on the next mini-batch.
    pub fn optimizer_step(&mut self, kind: StepKind) -> Result<PassCost> {
        let rows = self.sampler.next_indices();
        let batch = self.data.train.select(&rows);
        let cost = self.model.loss_and_grad(&batch)?;
        self.ledger
            .charge_training_pass(cost.forward_flops, cost.backward_flops_exact);
        self.optimizer.step(&mut self.model, &mut self.ledger)?;
        self.steps += 1;
        if let Some(h) = self.grads.as_mut() {
            h.push(self.steps, self.model.grad_snapshot()?)?;
        }
        self.push_row(kind, Some(cost.loss), None, None);
        Ok(cost)
    }

    /// Uncharged test-set evaluation, logged as an `eval` row.
    pub fn evaluate_test(&mut self) -> Result<f64> {
        let loss = self.model.loss(&self.data.test)?;
        self.push_row(StepKind::Eval, None, None, Some(loss));
        Ok(loss)
    }

    fn probe_batches(&self, stage: usize) -> Vec<Batch> {
        let k = self.cfg.consistency_batches;
        let n = self.data.train.example_count();
        let mut r = rng::substream(self.seed, Stream::DataOrder, (1u64 << 32) + stage as u64);
        (0..k)
            .map(|_| {
                let rows = sample(&mut r, n, self.cfg.batch_size).into_vec();
                self.data.train.select(&rows)
            })
            .collect()
    }

    /// A line-search stage along the update from `prev` to the current
    /// weights, with diagnostics taken from the current gradients.
    pub fn stage(&mut self, executor: &mut dyn StageExecutor, prev: &crate::tensor::Tensor) -> Result<StageRecord> {
        let index = self.stages.len();
        let dir = capture_direction(prev, &self.model.snapshot_trainable(), self.steps)?;
        let diag = stage_diagnostics(&self.model, &self.probe_batches(index))?;

        let started = self.started;
        let steps = self.steps;
        let mut probe_rows = Vec::new();
        let mut observer = |_tau: usize, loss: f64, ledger: &FlopsLedger| {
            probe_rows.push(TrainLogRow {
                step: steps,
                kind: StepKind::FfProbe,
                train_loss: None,
                val_loss: Some(loss),
                test_loss: None,
                flops: ledger.clone(),
                wall_ms: started.map(|t| t.elapsed().as_secs_f64() * 1e3).unwrap_or(0.0),
            });
        };
        let mut rec = executor.run_stage(&mut self.model, &dir, &self.data.val, &mut self.ledger, &mut observer)?;
        self.log.rows.extend(probe_rows);

        rec.index = index;
        rec.grad_norm = Some(diag.grad_norm);
        rec.cond_mean = diag.cond_mean;
        rec.cond_per_matrix = diag.cond_per_matrix;
        rec.batch_consistency = diag.batch_consistency;
        self.push_row(StepKind::FfCommit, None, Some(rec.best_loss()), None);
        self.policy.observe(index, rec.tau_star);
        self.stages.push(rec.clone());
        Ok(rec)
    }

    pub fn finish(self, stop: StopReason, final_test_loss: f64) -> RunOutcome {
        RunOutcome {
            ff_disabled_after_stage: self.policy.disabled_after_stage(),
            model: self.model,
            optimizer: self.optimizer,
            log: self.log,
            stages: self.stages,
            ledger: self.ledger,
            stop,
            steps: self.steps,
            final_test_loss,
            grad_history: self.grads,
        }
    }
}

struct StopState {
    criterion: StopCriterion,
    best: f64,
    stale: usize,
}

impl StopState {
    fn after_eval(&mut self, test_loss: f64) -> Option<StopReason> {
        match self.criterion {
            StopCriterion::TargetLoss { target, eps } => (test_loss <= target + eps).then_some(StopReason::TargetReached),
            StopCriterion::Convergence { patience, min_delta } => {
                if test_loss < self.best - min_delta {
                    self.best = test_loss;
                    self.stale = 0;
                } else {
                    self.stale += 1;
                }
                (self.stale >= patience).then_some(StopReason::Converged)
            }
            _ => None,
        }
    }

    fn after_step(&self, steps: usize, per_epoch: usize, max_epochs: usize) -> Option<StopReason> {
        match self.criterion {
            StopCriterion::Epochs(n) if steps >= n * per_epoch => return Some(StopReason::Epochs),
            StopCriterion::Steps(n) if steps >= n => return Some(StopReason::Steps),
            _ => {}
        }
        (steps >= max_epochs * per_epoch).then_some(StopReason::Budget)
    }
}

/// Runs the schedule with the standard line search.
pub fn run_schedule(
    model: Model,
    optimizer: Optimizer,
    data: &Splits,
    cfg: &ScheduleConfig,
    stop: StopCriterion,
    seed: u64,
) -> Result<RunOutcome> {
    let mut exec = LineSearch {
        max_ff_steps: cfg.fast_forward.max_ff_steps,
    };
    run_schedule_with(model, optimizer, data, cfg, stop, seed, &mut exec)
}

/// Runs the schedule with a caller-supplied stage executor.
pub fn run_schedule_with(
    model: Model,
    optimizer: Optimizer,
    data: &Splits,
    cfg: &ScheduleConfig,
    stop: StopCriterion,
    seed: u64,
    executor: &mut dyn StageExecutor,
) -> Result<RunOutcome> {
    stop.validate()?;
    let mut t = Trainer::new(model, optimizer, data, cfg.clone(), seed)?;
    let per_epoch = t.sampler.batches_per_epoch();
    let mut state = StopState {
        criterion: stop,
        best: f64::INFINITY,
        stale: 0,
    };
    let each_step = cfg.eval_cadence == EvalCadence::Step;

    let mut last_test = t.evaluate_test()?;
    if let Some(r) = state.after_eval(last_test) {
        return Ok(t.finish(r, last_test));
    }

    // Returns the stop reason once a criterion fires; `evaluated` tells
    // whether the final row already holds a fresh test loss.
    let reason = 'run: {
        for _ in 0..cfg.fast_forward.warmup_steps {
            t.optimizer_step(StepKind::Warmup)?;
            if each_step {
                last_test = t.evaluate_test()?;
                if let Some(r) = state.after_eval(last_test) {
                    break 'run r;
                }
            }
            if let Some(r) = state.after_step(t.steps, per_epoch, cfg.max_epochs) {
                break 'run r;
            }
        }
        if !each_step && cfg.fast_forward.warmup_steps > 0 {
            last_test = t.evaluate_test()?;
            if let Some(r) = state.after_eval(last_test) {
                break 'run r;
            }
        }

        loop {
            let ff = t.ff_active();
            let interval = cfg.fast_forward.interval;
            let mut prev = None;
            for i in 0..interval {
                if ff && i + 1 == interval {
                    prev = Some(t.model.snapshot_trainable());
                }
                t.optimizer_step(StepKind::Sgd)?;
                if each_step {
                    last_test = t.evaluate_test()?;
                    if let Some(r) = state.after_eval(last_test) {
                        break 'run r;
                    }
                }
                if let Some(r) = state.after_step(t.steps, per_epoch, cfg.max_epochs) {
                    break 'run r;
                }
            }
            if !each_step {
                last_test = t.evaluate_test()?;
                if let Some(r) = state.after_eval(last_test) {
                    break 'run r;
                }
            }
            if let Some(prev) = prev {
                t.stage(executor, &prev)?;
                last_test = t.evaluate_test()?;
                if let Some(r) = state.after_eval(last_test) {
                    break 'run r;
                }
                if cfg.max_stages.is_some_and(|m| t.stages.len() >= m) {
                    break 'run StopReason::StageLimit;
                }
            }
        }
    };

    if t.log.rows.last().is_none_or(|r| r.kind != StepKind::Eval) {
        last_test = t.evaluate_test()?;
    }
    Ok(t.finish(reason, last_test))
}
