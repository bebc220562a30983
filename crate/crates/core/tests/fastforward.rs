mod common;

use common::*;
use fastfwd::accounting::{Category, FlopsLedger, FF_SET_FLOPS_PER_SCALAR};
use fastfwd::data::Batch;
use fastfwd::fastforward::{
    fast_forward_stage, point_along, run_schedule, run_schedule_with, Direction, FastForwardConfig, LineSearch,
    ProbeObserver, ScheduleConfig, StageEnd, StageExecutor, StageRecord, StepKind, StopCriterion, StopReason,
    Trainer,
};
use fastfwd::model::Model;
use fastfwd::optim::{AdamConfig, AdamState, Optimizer};
use fastfwd::Tensor;
use proptest::prelude::*;

fn adam(lr: f64) -> Optimizer {
    Optimizer::Adam(AdamState::new(AdamConfig::with_lr(lr)))
}

fn no_observer() -> impl FnMut(usize, f64, &FlopsLedger) {
    |_, _, _| {}
}

/// Closed-form stop point on `L(τ) = Aτ² + Bτ + C`: the loss strictly
/// improves from τ to τ+1 iff `τ < τc − ½` with `τc = −B / 2A`.
fn quadratic_tau_star(scales: &[f64], targets: &[f64], w: &[f64], delta: &[f64], cap: usize) -> (usize, f64) {
    let d = scales.len() as f64;
    let mut a = 0.0;
    let mut b = 0.0;
    for i in 0..scales.len() {
        let s2 = scales[i] * scales[i];
        a += s2 * delta[i] * delta[i] / d;
        b += 2.0 * s2 * delta[i] * (w[i] - targets[i]) / d;
    }
    let tc = -b / (2.0 * a);
    let tau = if tc <= 0.5 { 0.0 } else { (tc - 0.5).ceil() };
    ((tau as usize).min(cap), tc)
}

fn quadratic_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..6).prop_flat_map(|d| {
        (
            prop::collection::vec(0.5f64..2.0, d),
            prop::collection::vec(-1.0f64..1.0, d),
            prop::collection::vec(-0.2f64..0.2, d),
            prop::collection::vec(-2.0f64..2.0, d),
            -5.0f64..130.0,
        )
            .prop_map(|(s, w, noise, delta, c)| {
                let t: Vec<f64> = (0..s.len()).map(|i| w[i] + c * delta[i] + noise[i]).collect();
                (s, t, w, delta)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tau_star_matches_closed_form_minimizer((s, t, w, delta) in quadratic_case()) {
        let cap = 100;
        let (expected, tc) = quadratic_tau_star(&s, &t, &w, &delta, cap);
        // skip near-ties where the comparison is decided by rounding
        let frac = (tc - 0.5) - (tc - 0.5).round();
        prop_assume!(frac.abs() > 1e-6 && (tc - 0.5 - cap as f64).abs() > 1e-6);
        prop_assume!(delta.iter().any(|&x| x != 0.0));

        let (mut model, batch) = separable_quadratic(&s, &t, &w);
        let dir = Direction { delta: Tensor::vector(delta.clone()), step: 0 };
        let mut ledger = FlopsLedger::new();
        let rec = fast_forward_stage(&mut model, &dir, cap, &batch, &mut ledger, &mut no_observer()).unwrap();
        prop_assert_eq!(rec.tau_star, expected, "τc = {}", tc);

        // recorded losses agree with the closed-form quadratic
        for (tau, &l) in rec.val_losses.iter().enumerate() {
            let p: Vec<f64> = w.iter().zip(&delta).map(|(w, d)| w + tau as f64 * d).collect();
            let direct = quadratic_value(&s, &t, &p);
            prop_assert!((l - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn reverted_stage_lands_exactly_on_accepted_point(seed in 0u64..10_000, step_scale in 0.01f64..3.0, cap in 0usize..40) {
        let (mut model, batch) = mlp_model(seed % 5);
        jitter(&mut model, 0.2, seed);
        let entry = model.snapshot_trainable();
        let mut delta = entry.clone();
        jitter_tensor(&mut delta, step_scale, seed + 1);
        let delta = delta.sub(&entry).unwrap();
        let dir = Direction { delta: delta.clone(), step: 0 };
        let mut ledger = FlopsLedger::new();
        let rec = fast_forward_stage(&mut model, &dir, cap, &batch, &mut ledger, &mut no_observer()).unwrap();
        let expected = point_along(&entry, &delta, rec.tau_star).unwrap();
        let got = model.snapshot_trainable();
        prop_assert!(got.data().iter().zip(expected.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        // strictly decreasing through τ*, and a failing tail entry is no better
        for w in rec.val_losses[..=rec.tau_star].windows(2) {
            prop_assert!(w[1] < w[0]);
        }
        if rec.end == StageEnd::NoImprovement {
            prop_assert_eq!(rec.val_losses.len(), rec.tau_star + 2);
            prop_assert!(*rec.val_losses.last().unwrap() >= rec.best_loss());
        } else {
            prop_assert_eq!(rec.tau_star, cap);
        }

        // bookkeeping identities
        let per_eval = model.forward_flops(&batch);
        let p = entry.numel() as u64;
        prop_assert_eq!(rec.forward_passes, rec.val_losses.len());
        prop_assert_eq!(rec.probes, rec.val_losses.len() - 1);
        prop_assert_eq!(rec.flops, rec.forward_passes as u64 * per_eval + rec.probes as u64 * FF_SET_FLOPS_PER_SCALAR * p);
        prop_assert_eq!(ledger.get(Category::FfValForward), rec.forward_passes as u64 * per_eval);
        prop_assert_eq!(ledger.total(), ledger.sum_of_categories());
    }
}

fn jitter_tensor(t: &mut Tensor, std: f64, seed: u64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for v in t.data_mut() {
        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
        *v += std * z;
    }
}

#[test]
fn one_dimensional_example_is_bit_exact() {
    let (mut model, batch) = separable_quadratic(&[1.0, 0.0], &[5.0, 0.0], &[0.0, 0.0]);
    // second coordinate has zero scale, so L = ½(w₀ − 5)²
    let dir = Direction { delta: Tensor::vector(vec![1.0, 0.0]), step: 0 };
    let mut ledger = FlopsLedger::new();
    let rec = fast_forward_stage(&mut model, &dir, 100, &batch, &mut ledger, &mut no_observer()).unwrap();
    assert_eq!(rec.val_losses, vec![12.5, 8.0, 4.5, 2.0, 0.5, 0.0, 0.5]);
    assert_eq!(rec.tau_star, 5);
    assert_eq!(model.snapshot_trainable().data(), &[5.0, 0.0]);
}

#[test]
fn stage_leaves_adam_moments_untouched() {
    let (task, p) = quadratic_task(2);
    let model = task.prepared_model().unwrap();
    let mut t = Trainer::new(model, adam(0.01), &task.data, p.schedule.clone(), 2).unwrap();
    for round in 0..4 {
        for _ in 0..5 {
            t.optimizer_step(StepKind::Sgd).unwrap();
        }
        let prev = t.model().snapshot_trainable();
        t.optimizer_step(StepKind::Sgd).unwrap();
        let before = t.optimizer().clone();
        let rec = t.stage(&mut LineSearch { max_ff_steps: 100 }, &prev).unwrap();
        assert_eq!(t.optimizer(), &before, "round {round}");
        if round == 0 {
            assert!(rec.tau_star > 0, "quadratic task should accept at least one probe");
        }
    }
}

#[test]
fn stage_moments_untouched_on_char_lm() {
    let (task, p) = char_lm_task(1);
    let model = task.prepared_model().unwrap();
    let mut t = Trainer::new(model, adam(0.01), &task.data, p.schedule.clone(), 1).unwrap();
    for _ in 0..5 {
        t.optimizer_step(StepKind::Warmup).unwrap();
    }
    let prev = t.model().snapshot_trainable();
    t.optimizer_step(StepKind::Sgd).unwrap();
    let before = t.optimizer().clone();
    t.stage(&mut LineSearch { max_ff_steps: 100 }, &prev).unwrap();
    assert_eq!(t.optimizer(), &before);
}

#[test]
fn zero_cap_matches_plain_adam_bit_exactly() {
    for (task, p) in [quadratic_task(0), synthetic_task(1)] {
        let mut off = p.schedule.clone();
        off.fast_forward = FastForwardConfig::disabled();
        let mut zero = p.schedule.clone();
        zero.fast_forward.max_ff_steps = 0;
        let stop = StopCriterion::Steps(60);
        let a = run_schedule(task.prepared_model().unwrap(), adam(0.01), &task.data, &off, stop, task.seed).unwrap();
        let b = run_schedule(task.prepared_model().unwrap(), adam(0.01), &task.data, &zero, stop, task.seed).unwrap();
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(a.log.train_losses()), bits(b.log.train_losses()));
        assert_eq!(a.model.snapshot_trainable(), b.model.snapshot_trainable());
        assert!(a.stages.is_empty());
        assert!(b.stages.iter().all(|s| s.tau_star == 0 && s.forward_passes == 1));
    }
}

/// Executor that replays a fixed τ* pattern without moving the weights.
struct Scripted {
    pattern: Vec<usize>,
    calls: usize,
}

impl StageExecutor for Scripted {
    fn run_stage(
        &mut self,
        model: &mut Model,
        dir: &Direction,
        val: &Batch,
        ledger: &mut FlopsLedger,
        observer: &mut ProbeObserver<'_>,
    ) -> fastfwd::Result<StageRecord> {
        let mut rec = fast_forward_stage(model, dir, 0, val, ledger, observer)?;
        rec.tau_star = self.pattern[self.calls % self.pattern.len()];
        self.calls += 1;
        Ok(rec)
    }
}

fn run_scripted(pattern: Vec<usize>, steps: usize) -> (fastfwd::fastforward::RunOutcome, usize) {
    let (task, p) = quadratic_task(4);
    let mut exec = Scripted { pattern, calls: 0 };
    let out = run_schedule_with(
        task.prepared_model().unwrap(),
        adam(0.01),
        &task.data,
        &p.schedule,
        StopCriterion::Steps(steps),
        task.seed,
        &mut exec,
    )
    .unwrap();
    (out, exec.calls)
}

#[test]
fn patience_disables_after_three_consecutive_failures() {
    let (out, calls) = run_scripted(vec![0], 200);
    assert_eq!(calls, 3);
    assert_eq!(out.stages.len(), 3);
    assert_eq!(out.ff_disabled_after_stage, Some(2));
    // training went on without acceleration
    assert_eq!(out.steps, 200);
    assert!(out.log.rows.iter().skip_while(|r| r.kind != StepKind::FfCommit).filter(|r| r.kind == StepKind::FfCommit).count() == 3);

    let (out, calls) = run_scripted(vec![0, 0, 4, 0, 0, 1, 0, 0, 0, 7], 400);
    assert_eq!(calls, 9);
    assert_eq!(out.ff_disabled_after_stage, Some(8));

    let (out, _) = run_scripted(vec![0, 0, 1], 200);
    assert_eq!(out.ff_disabled_after_stage, None);
}

#[test]
fn schedule_shape_and_ledger_identities() {
    let (task, p) = synthetic_task(0);
    let out = run_schedule(
        task.prepared_model().unwrap(),
        adam(0.01),
        &task.data,
        &p.schedule,
        StopCriterion::Epochs(3),
        task.seed,
    )
    .unwrap();
    assert_eq!(out.stop, StopReason::Epochs);
    assert_eq!(out.steps, 3 * (task.data.train.example_count() / 32));
    assert_eq!(out.ledger.total(), out.ledger.sum_of_categories());

    let mut prev = FlopsLedger::new();
    let mut training_rows = 0;
    for row in &out.log.rows {
        assert_eq!(row.flops.total(), row.flops.sum_of_categories());
        let df = row.flops.get(Category::ForwardTrain) - prev.get(Category::ForwardTrain);
        let db = row.flops.get(Category::BackwardTrain) - prev.get(Category::BackwardTrain);
        assert_eq!(db, 2 * df);
        if matches!(row.kind, StepKind::Warmup | StepKind::Sgd) {
            assert!(df > 0);
            training_rows += 1;
        } else {
            assert_eq!(df, 0);
        }
        prev = row.flops.clone();
    }
    assert_eq!(training_rows, out.steps);

    let warm = out.log.rows.iter().filter(|r| r.kind == StepKind::Warmup).count();
    assert_eq!(warm, 6);
    let p_count = out.model.trainable_count() as u64;
    let per_eval = out.model.forward_flops(&task.data.val);
    for (i, s) in out.stages.iter().enumerate() {
        assert_eq!(s.index, i);
        assert_eq!(s.forward_passes, s.val_losses.len());
        assert_eq!(s.flops, s.forward_passes as u64 * per_eval + s.probes as u64 * FF_SET_FLOPS_PER_SCALAR * p_count);
        assert_eq!(s.entry_step, 6 + 6 * (i + 1));
    }
    let val_total: u64 = out.stages.iter().map(|s| s.forward_passes as u64 * per_eval).sum();
    assert_eq!(out.ledger.get(Category::FfValForward), val_total);
    assert_eq!(out.ledger.get(Category::EvalForward), 0);
}

#[test]
fn target_loss_edges() {
    let (task, p) = quadratic_task(1);
    let initial = task.prepared_model().unwrap().loss(&task.data.test).unwrap();

    let at_start = run_schedule(
        task.prepared_model().unwrap(),
        adam(0.01),
        &task.data,
        &p.schedule,
        StopCriterion::target_loss(initial, 0.0),
        task.seed,
    )
    .unwrap();
    assert_eq!(at_start.stop, StopReason::TargetReached);
    assert_eq!(at_start.steps, 0);
    assert_eq!(at_start.ledger.total(), 0);

    let mut capped = p.schedule.clone();
    capped.max_epochs = 2;
    let never = run_schedule(
        task.prepared_model().unwrap(),
        adam(0.01),
        &task.data,
        &capped,
        StopCriterion::target_loss(f64::NEG_INFINITY, 1e-4),
        task.seed,
    )
    .unwrap();
    assert_eq!(never.stop, StopReason::Budget);
    assert!(!never.reached_target());

    assert!(StopCriterion::target_loss(f64::NAN, 1e-4).validate().is_err());
    assert!(StopCriterion::target_loss(1.0, -1.0).validate().is_err());
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (task, p) = synthetic_task(3);
    let run = || {
        run_schedule(task.prepared_model().unwrap(), adam(0.01), &task.data, &p.schedule, StopCriterion::Epochs(2), 3).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.stages, b.stages);
    assert_eq!(a.model, b.model);
}

#[test]
fn sgd_schedule_runs_and_charges_two_per_scalar() {
    let (task, mut p) = quadratic_task(0);
    p.schedule.fast_forward = FastForwardConfig::disabled();
    let out = run_schedule(
        task.prepared_model().unwrap(),
        Optimizer::Sgd { lr: 0.05 },
        &task.data,
        &p.schedule,
        StopCriterion::Steps(10),
        0,
    )
    .unwrap();
    let n = out.model.trainable_count() as u64;
    assert_eq!(out.ledger.get(Category::OptimizerUpdate), 10 * 2 * n);
}

#[allow(dead_code)]
fn schedule(batch: usize) -> ScheduleConfig {
    ScheduleConfig::new(batch, FastForwardConfig::default())
}
