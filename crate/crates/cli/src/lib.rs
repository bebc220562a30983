//! `fastfwd` command-line driver. Every subcommand reads one config file and
//! writes CSVs, a `summary.json` and a `manifest.json` into an output
//! directory.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use fastfwd::accounting::FlopsLedger;
use fastfwd::config::{parse_config, RunConfig};
use fastfwd::error::{Error, ErrorCategory, Result};
use fastfwd::experiments::{
    compare, ff_duration_probe, fullrank_probe, grad_similarity_matrix, interval_sweep, loss_plane, rank_sweep,
    run_baseline, run_to_target, Comparison, Protocol, Task,
};
use fastfwd::fastforward::{run_schedule, RunOutcome};
use fastfwd::optim::{AdamState, Optimizer};
use fastfwd::output::{self, OutputDir};
use fastfwd::task::build_task;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;
pub const EXIT_CONTRACT: i32 = 6;

/// Default output root when neither `--out` nor `output_dir` is given.
pub const OUT_ENV: &str = "FASTFWD_OUT";

#[derive(Debug, Parser)]
#[command(name = "fastfwd", version, about = "Line-search accelerated low-rank finetuning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory; defaults to `output_dir`, then $FASTFWD_OUT/<name>.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Suppress the summary on stdout.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One run (baseline or accelerated per the config) with the config's stop rule.
    Train(Common),
    /// Baseline for a fixed budget, then the accelerated arm to the same test loss.
    Compare(Common),
    /// `compare` for every feasible adapter rank.
    SweepRank(Common),
    /// τ* of the second stage for each interval length.
    SweepInterval(Common),
    /// Test loss on the plane through the initial, baseline and accelerated weights.
    Plane(Common),
    /// Cosine similarity between gradients of different steps.
    GradSim(Common),
    /// Full validation-loss curves along the update direction, ignoring the stop rule.
    FfProbe(Common),
    /// Accelerated schedule without adapters: all parameters, then attention only.
    FullrankProbe(Common),
    /// Gradient norm, condition number and batch consistency at each stage.
    Diagnostics(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train(c)
            | Command::Compare(c)
            | Command::SweepRank(c)
            | Command::SweepInterval(c)
            | Command::Plane(c)
            | Command::GradSim(c)
            | Command::FfProbe(c)
            | Command::FullrankProbe(c)
            | Command::Diagnostics(c) => c,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Compare(_) => "compare",
            Command::SweepRank(_) => "sweep-rank",
            Command::SweepInterval(_) => "sweep-interval",
            Command::Plane(_) => "plane",
            Command::GradSim(_) => "grad-sim",
            Command::FfProbe(_) => "ff-probe",
            Command::FullrankProbe(_) => "fullrank-probe",
            Command::Diagnostics(_) => "diagnostics",
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.category() {
        ErrorCategory::Config => EXIT_CONFIG,
        ErrorCategory::Io => EXIT_IO,
        ErrorCategory::Numeric => EXIT_NUMERIC,
        ErrorCategory::Contract => EXIT_CONTRACT,
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("fastfwd {}: {e}", cli.command.name());
            exit_code(&e)
        }
    }
}

/// Runs a parsed command and returns the output directory.
pub fn execute(cli: &Cli) -> Result<PathBuf> {
    let common = cli.command.common();
    let mut cfg = parse_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let config_dir = common.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out_dir = resolve_out(common, &cfg, &config_dir, cli.command.name());
    let task = build_task(&cfg, &config_dir)?;
    let mut out = OutputDir::create(&out_dir)?;
    let mut protocol = cfg.protocol();
    if !matches!(cli.command, Command::GradSim(_)) {
        protocol.schedule.grad_history = 0;
    }

    let summary = match &cli.command {
        Command::Train(_) => train(&cfg, &protocol, &task, &mut out)?,
        Command::Compare(_) => {
            let c = compare(&task, &protocol)?;
            write_comparison(&c, &mut out)?;
            comparison_summary(&c)
        }
        Command::SweepRank(_) => {
            let rows = rank_sweep(&task, &cfg.experiments.ranks, &protocol)?;
            out.csv("", &output::SWEEP, &output::sweep_rows(&rows))?;
            json!({ "rows": rows })
        }
        Command::SweepInterval(_) => {
            let points = interval_sweep(&task, &cfg.experiments.intervals, &protocol)?;
            out.csv("", &output::INTERVALS, &output::interval_rows(&points))?;
            json!({ "points": points })
        }
        Command::Plane(_) => plane(&cfg, &protocol, &task, &mut out)?,
        Command::GradSim(_) => grad_sim(&protocol, &task, &mut out)?,
        Command::FfProbe(_) => {
            let e = &cfg.experiments;
            let run = ff_duration_probe(&task, &protocol, e.duration_steps, e.duration_stages)?;
            out.csv("", &output::FFPROBE, &output::ffprobe_rows(&run.stages))?;
            write_run("", &run, &mut out)?;
            json!({
                "duration_steps": e.duration_steps,
                "tau_star": run.stages.iter().map(|s| s.tau_star).collect::<Vec<_>>(),
            })
        }
        Command::FullrankProbe(_) => fullrank(&protocol, &task, &mut out)?,
        Command::Diagnostics(_) => {
            if protocol.schedule.consistency_batches == 0 {
                protocol.schedule.consistency_batches = 4;
            }
            let baseline = run_baseline(&task, &protocol)?;
            let run = run_to_target(&task, &protocol, baseline.final_test_loss)?;
            write_run("", &run, &mut out)?;
            out.csv("", &output::CONDITION, &output::condition_rows(&run.stages))?;
            json!({ "stages": run.stages.len(), "consistency_batches": protocol.schedule.consistency_batches })
        }
    };
    out.json("summary.json", &summary)?;
    out.finish(cli.command.name(), &cfg)?;
    if !common.quiet {
        // a closed pipe (e.g. `| head`) is not a failure of the run
        let mut stdout = std::io::stdout().lock();
        let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
        let _ = writeln!(stdout, "wrote {}", out_dir.display());
    }
    Ok(out_dir)
}

fn resolve_out(common: &Common, cfg: &RunConfig, config_dir: &Path, command: &str) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    if let Some(o) = &cfg.output_dir {
        return config_dir.join(o);
    }
    let stem = common
        .config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"));
    if stem == command {
        root.join(stem)
    } else {
        root.join(format!("{stem}-{command}"))
    }
}

fn write_run(prefix: &str, run: &RunOutcome, out: &mut OutputDir) -> Result<()> {
    out.csv(prefix, &output::TRAINLOG, &output::trainlog_rows(&run.log))?;
    out.csv(prefix, &output::STAGES, &output::stage_rows(&run.stages))?;
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    steps: usize,
    stop: fastfwd::fastforward::StopReason,
    final_test_loss: f64,
    flops_total: u64,
    stages: usize,
    ff_disabled_after_stage: Option<usize>,
}

fn run_summary(run: &RunOutcome) -> RunSummary {
    RunSummary {
        steps: run.steps,
        stop: run.stop,
        final_test_loss: run.final_test_loss,
        flops_total: run.ledger.total(),
        stages: run.stages.len(),
        ff_disabled_after_stage: run.ff_disabled_after_stage,
    }
}

fn train(cfg: &RunConfig, protocol: &Protocol, task: &Task, out: &mut OutputDir) -> Result<serde_json::Value> {
    let run = run_schedule(
        task.prepared_model()?,
        Optimizer::Adam(AdamState::new(cfg.optimizer)),
        &task.data,
        &protocol.schedule,
        cfg.stop_criterion(),
        cfg.seed,
    )?;
    write_run("", &run, out)?;
    out.csv("", &output::CONDITION, &output::condition_rows(&run.stages))?;
    Ok(json!(run_summary(&run)))
}

fn write_comparison(c: &Comparison, out: &mut OutputDir) -> Result<()> {
    write_run("baseline/", &c.baseline, out)?;
    write_run("ff/", &c.ff, out)
}

fn comparison_summary(c: &Comparison) -> serde_json::Value {
    json!({
        "target_test_loss": c.target,
        "reached_target": c.ff.reached_target(),
        "baseline_flops": c.baseline.ledger.total(),
        "ff_flops": c.ff.ledger.total(),
        "savings": c.savings,
        "baseline": run_summary(&c.baseline),
        "ff": run_summary(&c.ff),
    })
}

fn plane(cfg: &RunConfig, protocol: &Protocol, task: &Task, out: &mut OutputDir) -> Result<serde_json::Value> {
    let c = compare(task, protocol)?;
    let start = task.prepared_model()?;
    let w0 = start.snapshot_trainable();
    let w_sgd = c.baseline.model.snapshot_trainable();
    let w_ff = c.ff.model.snapshot_trainable();
    let mut ledger = FlopsLedger::new();
    let e = &cfg.experiments;
    let grid = loss_plane(&start, &w0, &w_sgd, &w_ff, e.plane_resolution, e.plane_margin, &task.data.test, &mut ledger)?;
    out.csv("", &output::PLANE, &output::plane_rows(&grid))?;
    let names = ["w0", "w_sgd", "w_ff"];
    let mut anchors = Vec::new();
    for (name, &(a, b)) in names.iter().zip(&grid.anchors) {
        anchors.push(json!({
            "anchor": name,
            "a": a,
            "b": b,
            "loss": grid.evaluate_at(&start, &task.data.test, a, b)?,
        }));
    }
    Ok(json!({
        "scale": grid.scale,
        "anchors": anchors,
        "eval_flops": ledger.total(),
        "comparison": comparison_summary(&c),
    }))
}

fn grad_sim(protocol: &Protocol, task: &Task, out: &mut OutputDir) -> Result<serde_json::Value> {
    if protocol.schedule.grad_history == 0 {
        return Err(Error::config("train.grad_history", "grad-sim needs a positive history length"));
    }
    let c = compare(task, protocol)?;
    let mut means = serde_json::Map::new();
    for (prefix, run) in [("baseline/", &c.baseline), ("ff/", &c.ff)] {
        let hist = run
            .grad_history
            .as_ref()
            .ok_or_else(|| Error::contract("run kept no gradient history"))?;
        let m = grad_similarity_matrix(hist);
        out.csv(prefix, &output::GRADSIM, &output::gradsim_rows(&m))?;
        let defined: Vec<f64> = m.running_mean.iter().filter_map(|(_, v)| *v).collect();
        let overall = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        means.insert(prefix.trim_end_matches('/').to_string(), json!({ "snapshots": hist.len(), "mean_cosine": overall }));
    }
    Ok(serde_json::Value::Object(means))
}

fn fullrank(protocol: &Protocol, task: &Task, out: &mut OutputDir) -> Result<serde_json::Value> {
    let mut modes = vec![("all/", false)];
    if !task.base.architecture().attention_matrices().is_empty() {
        modes.push(("attention/", true));
    }
    let mut summary = serde_json::Map::new();
    for (prefix, restrict) in modes {
        let probe = fullrank_probe(task, restrict, protocol)?;
        write_run(prefix, &probe.outcome, out)?;
        summary.insert(
            prefix.trim_end_matches('/').to_string(),
            json!({
                "trainable": probe.trainable,
                "tau_zero_rate": probe.tau_zero_rate(),
                "first_tau_star": probe.outcome.stages.first().map(|s| s.tau_star),
                "run": run_summary(&probe.outcome),
            }),
        );
    }
    Ok(serde_json::Value::Object(summary))
}
