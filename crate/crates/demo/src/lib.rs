//! Browser demo: the synthetic low-rank task with three views — loss
//! against FLOPs for both arms, line-search duration curves, and the loss
//! plane through the start and both end points.
//!
//! The `view_*` functions are plain Rust; the `#[wasm_bindgen]` wrappers
//! hand their results to JavaScript as JSON strings.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use fastfwd::accounting::FlopsLedger;
use fastfwd::adapters::{AdapterSpec, TargetSelector};
use fastfwd::data::split;
use fastfwd::experiments::{compare, ff_duration_probe, loss_plane, Comparison, Protocol, Task};
use fastfwd::fastforward::{FastForwardConfig, RunOutcome, ScheduleConfig, StepKind};
use fastfwd::model::make_synthetic_lowrank;
use fastfwd::optim::AdamConfig;
use fastfwd::Result;

const DIM: usize = 32;
const TRUE_RANK: usize = 4;

fn synthetic(seed: u64, rank: usize, lr: f64) -> Result<(Task, Protocol)> {
    let t = make_synthetic_lowrank(DIM, DIM, TRUE_RANK, 0.1, 1312, seed)?;
    let task = Task {
        base: t.model,
        data: split(&t.data, 256, 32, seed)?,
        adapter: Some(AdapterSpec::lora(rank.clamp(1, DIM), TargetSelector::Explicit(vec!["w".into()]))),
        seed,
    };
    let protocol = Protocol {
        adam: AdamConfig::with_lr(lr),
        schedule: ScheduleConfig::new(32, FastForwardConfig::default()),
        baseline_epochs: 5,
        eps: 1e-4,
    };
    Ok((task, protocol))
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub flops: Vec<u64>,
    pub test_loss: Vec<f64>,
}

impl Curve {
    fn of(run: &RunOutcome) -> Self {
        let evals = run.log.rows.iter().filter(|r| r.kind == StepKind::Eval);
        let (flops, test_loss) = evals.filter_map(|r| Some((r.flops.total(), r.test_loss?))).unzip();
        Curve { flops, test_loss }
    }
}

#[derive(Debug, Serialize)]
pub struct CompareView {
    pub baseline: Curve,
    pub ff: Curve,
    pub target: f64,
    pub savings: Option<f64>,
    pub tau_star: Vec<usize>,
}

pub fn view_compare(seed: u64, rank: usize, lr: f64) -> Result<CompareView> {
    let (task, p) = synthetic(seed, rank, lr)?;
    Ok(compare_view(&compare(&task, &p)?))
}

fn compare_view(c: &Comparison) -> CompareView {
    CompareView {
        baseline: Curve::of(&c.baseline),
        ff: Curve::of(&c.ff),
        target: c.target,
        savings: c.savings,
        tau_star: c.ff.stages.iter().map(|s| s.tau_star).collect(),
    }
}

#[derive(Debug, Serialize)]
pub struct DurationView {
    /// Validation loss at τ = 0..=steps, one curve per stage.
    pub curves: Vec<Vec<f64>>,
    pub tau_star: Vec<usize>,
}

pub fn view_duration(seed: u64, rank: usize, lr: f64, steps: usize, stages: usize) -> Result<DurationView> {
    let (task, p) = synthetic(seed, rank, lr)?;
    let run = ff_duration_probe(&task, &p, steps, stages)?;
    Ok(DurationView {
        curves: run.stages.iter().map(|s| s.val_losses.clone()).collect(),
        tau_star: run.stages.iter().map(|s| s.tau_star).collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct PlaneView {
    pub a_values: Vec<f64>,
    pub b_values: Vec<f64>,
    pub loss: Vec<Vec<f64>>,
    /// `w0`, `w_sgd`, `w_ff` in plane coordinates.
    pub anchors: [(f64, f64); 3],
}

pub fn view_plane(seed: u64, rank: usize, lr: f64, resolution: usize) -> Result<PlaneView> {
    let (task, p) = synthetic(seed, rank, lr)?;
    let c = compare(&task, &p)?;
    let start = task.prepared_model()?;
    let grid = loss_plane(
        &start,
        &start.snapshot_trainable(),
        &c.baseline.model.snapshot_trainable(),
        &c.ff.model.snapshot_trainable(),
        resolution.clamp(2, 81),
        0.25,
        &task.data.test,
        &mut FlopsLedger::new(),
    )?;
    Ok(PlaneView {
        a_values: grid.a_values,
        b_values: grid.b_values,
        loss: grid.loss,
        anchors: grid.anchors,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
        .and_then(|v| serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string())))
}

#[wasm_bindgen]
pub fn compare_curves(seed: u32, rank: u32, lr: f64) -> std::result::Result<String, JsValue> {
    to_js(view_compare(seed.into(), rank as usize, lr))
}

#[wasm_bindgen]
pub fn duration_curves(seed: u32, rank: u32, lr: f64, steps: u32, stages: u32) -> std::result::Result<String, JsValue> {
    to_js(view_duration(seed.into(), rank as usize, lr, steps as usize, stages as usize))
}

#[wasm_bindgen]
pub fn plane_grid(seed: u32, rank: u32, lr: f64, resolution: u32) -> std::result::Result<String, JsValue> {
    to_js(view_plane(seed.into(), rank as usize, lr, resolution as usize))
}
