//! Run configuration, one TOML file per run.
//!
//! Every section except `[task]` is optional; omitted keys take the
//! defaults documented on each field. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSpec;
use crate::data::DEFAULT_VAL_COUNT;
use crate::error::{Error, Result};
use crate::experiments::{Protocol, DEFAULT_DURATION_STEPS, DEFAULT_RANKS};
use crate::fastforward::{EvalCadence, FastForwardConfig, ScheduleConfig, StopCriterion};
use crate::optim::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it.
    #[serde(default)]
    pub seed: u64,
    pub task: TaskConfig,
    #[serde(default)]
    pub data: DataConfig,
    /// Without this section the whole model is trained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterSpec>,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub fast_forward: FastForwardConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    /// Stop rule for `train`; defaults to `protocol.baseline_epochs` epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<StopCriterion>,
    #[serde(default)]
    pub experiments: ExperimentsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Written as a sub-table naming the task, e.g. `[task.synthetic]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Linear regression whose targets come from a low-rank shift of the
    /// pretrained weight.
    Synthetic {
        #[serde(default = "d32")]
        d: usize,
        #[serde(default = "d32")]
        k: usize,
        #[serde(default = "d4")]
        true_rank: usize,
        #[serde(default = "noise")]
        noise_std: f64,
        #[serde(default = "examples")]
        examples: usize,
    },
    Mlp {
        #[serde(default = "d16")]
        in_dim: usize,
        #[serde(default = "d32")]
        hidden: usize,
        #[serde(default = "d4")]
        classes: usize,
        #[serde(default = "examples")]
        examples: usize,
    },
    CharLm {
        /// UTF-8 text file, relative to the config file. Without it a
        /// generated corpus of `synthetic_chars` characters is used.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        corpus: Option<PathBuf>,
        #[serde(default = "synthetic_chars")]
        synthetic_chars: usize,
        #[serde(default = "d32")]
        embed_dim: usize,
        #[serde(default = "d2")]
        layer_count: usize,
        #[serde(default = "d4")]
        head_count: usize,
        #[serde(default = "d32")]
        context_length: usize,
        /// Full-parameter Adam steps applied to the base before adapters
        /// are attached. Shared by both arms and not charged.
        #[serde(default)]
        pretrain_steps: usize,
        #[serde(default = "pretrain_lr")]
        pretrain_lr: f64,
    },
}

fn d2() -> usize {
    2
}
fn d4() -> usize {
    4
}
fn d16() -> usize {
    16
}
fn d32() -> usize {
    32
}
fn noise() -> f64 {
    0.1
}
fn examples() -> usize {
    1312
}
fn synthetic_chars() -> usize {
    24_000
}
fn pretrain_lr() -> f64 {
    3e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "test_count")]
    pub test_count: usize,
    /// Size of the validation set used by the line search.
    #[serde(default = "val_count")]
    pub val_count: usize,
}

fn test_count() -> usize {
    256
}
fn val_count() -> usize {
    DEFAULT_VAL_COUNT
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            test_count: test_count(),
            val_count: val_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d32")]
    pub batch_size: usize,
    #[serde(default = "cadence")]
    pub eval_cadence: EvalCadence,
    /// Safety cap on epochs for runs whose stop rule never fires.
    #[serde(default = "max_epochs")]
    pub max_epochs: usize,
    /// Milliseconds since run start in the log; off keeps outputs
    /// byte-reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Gradient snapshots kept for `grad-sim` (ring buffer).
    #[serde(default = "grad_history")]
    pub grad_history: usize,
    /// Mini-batches for the stage-entry consistency diagnostic; 0 disables.
    #[serde(default)]
    pub consistency_batches: usize,
}

fn cadence() -> EvalCadence {
    EvalCadence::Interval
}
fn max_epochs() -> usize {
    50
}
fn grad_history() -> usize {
    256
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: d32(),
            eval_cadence: cadence(),
            max_epochs: max_epochs(),
            record_wall_time: false,
            grad_history: grad_history(),
            consistency_batches: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    #[serde(default = "baseline_epochs")]
    pub baseline_epochs: usize,
    /// Tolerance on the target test loss.
    #[serde(default = "eps")]
    pub eps: f64,
}

fn baseline_epochs() -> usize {
    5
}
fn eps() -> f64 {
    1e-4
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            baseline_epochs: baseline_epochs(),
            eps: eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentsConfig {
    #[serde(default = "ranks")]
    pub ranks: Vec<usize>,
    #[serde(default = "intervals")]
    pub intervals: Vec<usize>,
    #[serde(default = "plane_resolution")]
    pub plane_resolution: usize,
    /// Fraction of the anchor span added beyond the anchors on each side.
    #[serde(default = "plane_margin")]
    pub plane_margin: f64,
    #[serde(default = "duration_steps")]
    pub duration_steps: usize,
    #[serde(default = "d4")]
    pub duration_stages: usize,
}

fn ranks() -> Vec<usize> {
    DEFAULT_RANKS.to_vec()
}
fn intervals() -> Vec<usize> {
    (1..=10).collect()
}
fn plane_resolution() -> usize {
    21
}
fn plane_margin() -> f64 {
    0.25
}
fn duration_steps() -> usize {
    DEFAULT_DURATION_STEPS
}

impl Default for ExperimentsConfig {
    fn default() -> Self {
        ExperimentsConfig {
            ranks: ranks(),
            intervals: intervals(),
            plane_resolution: plane_resolution(),
            plane_margin: plane_margin(),
            duration_steps: duration_steps(),
            duration_stages: d4(),
        }
    }
}

impl RunConfig {
    /// Minimal configuration: a task and defaults everywhere else.
    pub fn for_task(task: TaskConfig, seed: u64) -> Self {
        RunConfig {
            seed,
            task,
            data: DataConfig::default(),
            adapter: None,
            optimizer: AdamConfig::default(),
            train: TrainConfig::default(),
            fast_forward: FastForwardConfig::default(),
            protocol: ProtocolConfig::default(),
            stop: None,
            experiments: ExperimentsConfig::default(),
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.task {
            TaskConfig::Synthetic {
                d,
                k,
                true_rank,
                noise_std,
                ..
            } => {
                if *d == 0 || *k == 0 {
                    return Err(Error::config("task.synthetic.d", "dimensions must be positive"));
                }
                if *true_rank == 0 || *true_rank > (*d).min(*k) {
                    return Err(Error::config("task.synthetic.true_rank", "must lie in 1..=min(d, k)"));
                }
                if !(*noise_std >= 0.0) {
                    return Err(Error::config("task.synthetic.noise_std", "must be non-negative"));
                }
            }
            TaskConfig::Mlp { classes, .. } if *classes < 2 => {
                return Err(Error::config("task.mlp.classes", "must be at least 2"));
            }
            TaskConfig::CharLm { pretrain_lr, .. } if !(*pretrain_lr >= 0.0) => {
                return Err(Error::config("task.char_lm.pretrain_lr", "must be non-negative"));
            }
            _ => {}
        }
        if self.data.val_count == 0 {
            return Err(Error::config("data.val_count", "must be at least 1"));
        }
        if self.data.test_count == 0 {
            return Err(Error::config("data.test_count", "must be at least 1"));
        }
        if let Some(a) = &self.adapter {
            a.validate()?;
        }
        self.optimizer.validate()?;
        self.schedule().validate()?;
        if self.protocol.baseline_epochs == 0 {
            return Err(Error::config("protocol.baseline_epochs", "must be at least 1"));
        }
        if !(self.protocol.eps >= 0.0) {
            return Err(Error::config("protocol.eps", "must be non-negative"));
        }
        if let Some(s) = &self.stop {
            s.validate()?;
        }
        let e = &self.experiments;
        if e.ranks.is_empty() || e.ranks.contains(&0) {
            return Err(Error::config("experiments.ranks", "needs positive ranks"));
        }
        if e.intervals.is_empty() || e.intervals.contains(&0) {
            return Err(Error::config("experiments.intervals", "needs positive intervals"));
        }
        if e.plane_resolution == 0 {
            return Err(Error::config("experiments.plane_resolution", "must be at least 1"));
        }
        if !(e.plane_margin >= 0.0) {
            return Err(Error::config("experiments.plane_margin", "must be non-negative"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            batch_size: self.train.batch_size,
            fast_forward: self.fast_forward.clone(),
            eval_cadence: self.train.eval_cadence,
            max_epochs: self.train.max_epochs,
            max_stages: None,
            record_wall_time: self.train.record_wall_time,
            grad_history: self.train.grad_history,
            consistency_batches: self.train.consistency_batches,
        }
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            adam: self.optimizer,
            schedule: self.schedule(),
            baseline_epochs: self.protocol.baseline_epochs,
            eps: self.protocol.eps,
        }
    }

    pub fn stop_criterion(&self) -> StopCriterion {
        self.stop
            .unwrap_or(StopCriterion::Epochs(self.protocol.baseline_epochs))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Parses and validates a configuration from TOML text.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::new(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." { "(root)".to_string() } else { path };
        Error::Config {
            key,
            message: e.into_inner().message().trim().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
